"""Ground-truth world: the hidden physical state the estimator reasons about.

Advances the true tool state through the friction-corrected manifold
dynamics (with spectrum flooring through snap-through zones), produces
noisy wrench observations, and articulates the screw during loosening with
a breakaway-torque model.
"""

from __future__ import annotations

import numpy as np

from .dynamics import FrictionParams, SolverConfig, rk4_step_batch
from .geometry import CompositeShape, Pose2, ToolPointCloud
from .potential import PotentialParams, eval_potential


class GroundTruthWorld:
    """One trial's physical state: true shape, true pose, true tool state."""

    def __init__(self, shape: CompositeShape, theta: np.ndarray,
                 tool: ToolPointCloud, params: PotentialParams,
                 friction: FrictionParams, solver: SolverConfig,
                 breakaway_torque: float = 0.3, viscosity: float = 2.0):
        self.shape = shape
        self.theta = np.asarray(theta, dtype=float).copy()
        self.theta0 = self.theta.copy()
        self.tool = tool
        self.params = params
        self.friction = friction
        self.solver = solver
        self.breakaway = breakaway_torque
        self.viscosity = viscosity
        self.z = None                      # set by reset()
        self.t = 0.0
        self.screw_free = False

    def reset(self, z0: np.ndarray):
        self.z = np.asarray(z0, dtype=float).copy()
        self.t = 0.0

    def set_stiffness(self, kc: np.ndarray):
        self.params = self.params.with_stiffness(kc)

    def step(self, u: np.ndarray, u_dot: np.ndarray, dt: float):
        """Advance the true tool state one integrator step."""
        z, _ = rk4_step_batch(self.z[None], u[None], u_dot[None],
                              self.theta[None], self.shape, self.tool,
                              self.params, self.friction, self.solver, dt,
                              regularize=True)
        self.z = z[0]
        if self.screw_free:
            self._advance_screw(u, dt)
        self.t += dt

    def _advance_screw(self, u: np.ndarray, dt: float):
        """Overdamped screw rotation above the breakaway torque."""
        ev = eval_potential(self.z[None], u[None], self.theta[None],
                            self.shape, self.tool, self.params,
                            want_theta=True)
        tau = -ev.grad_theta[0, 2]        # contact torque on the screw
        excess = abs(tau) - self.breakaway
        if excess > 0.0:
            self.theta[2] += dt * np.sign(tau) * excess / self.viscosity

    def contact_wrench(self, u: np.ndarray) -> np.ndarray:
        """Noiseless contact wrench on the tool at the current state."""
        ev = eval_potential(self.z[None], u[None], self.theta[None],
                            self.shape, self.tool, self.params)
        return -ev.grad_u[0]

    def screw_rotation(self) -> float:
        return float(self.theta[2] - self.theta0[2])


def simulate_observation(world: GroundTruthWorld, u: np.ndarray,
                         Sigma: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Noisy wrench measurement at the current world state."""
    return world.contact_wrench(u) + rng.multivariate_normal(np.zeros(3), Sigma)
