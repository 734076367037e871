"""Receding-horizon planning: DMP-parameterized rollouts scored by haptic cost.

A second-order attractor with a Gaussian-basis forcing term generates
command trajectories u(t); candidate forcing weights are sampled around the
current ones, rolled out through the manifold dynamics with the current
MAP object estimate, and the elite fraction averaged into the new policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import FrictionParams, SolverConfig, manifold_rhs_batch
from .errors import AllInfeasible, IncompatibleGeometry
from .geometry import CompositeShape, Pose2, ToolPointCloud, rot2, wrap_angle
from .potential import PotentialParams, haptic_metric_batch

N_BASIS = 10
ALPHA_S = 4.0          # canonical phase decay rate


@dataclass(frozen=True)
class DmpParams:
    """Critically damped attractor with a phase-gated forcing term."""

    beta: np.ndarray           # (N_BASIS, 3) forcing weights
    tau: float                 # time scale (s)
    alpha1: float
    alpha2: float
    u0: Pose2
    uT: Pose2

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float).reshape(N_BASIS, 3)
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)
        if abs(self.alpha1 - 4.0 * self.alpha2) > 1e-9:
            raise ValueError("critical damping requires alpha1 = 4 alpha2")

    @staticmethod
    def straight_line(u0: Pose2, uT: Pose2, tau: float = 1.0,
                      alpha2: float = 4.0) -> "DmpParams":
        return DmpParams(beta=np.zeros((N_BASIS, 3)), tau=tau,
                         alpha1=4.0 * alpha2, alpha2=alpha2, u0=u0, uT=uT)


@dataclass
class Rollout:
    u_traj: np.ndarray         # (T+1, 3)
    z_traj: np.ndarray         # (T+1, 3)
    psi_final: float
    cost: float
    feasible: bool = True
    n_steps: int = 0


@dataclass(frozen=True)
class PlannerConfig:
    horizon: float = 0.5
    dt: float = 5e-3
    n_rollouts: int = 20
    elite_frac: float = 0.25
    n_basis: int = N_BASIS
    metric_power: int = 2          # exponent on G in the running cost
    terminal_sigma: np.ndarray = field(
        default_factory=lambda: np.array([1e-4, 1e-4, math.radians(5.0) ** 2]))
    exploration_frac: float = 0.1  # Lambda scale vs. goal distance
    exploration_floor: np.ndarray = field(
        default_factory=lambda: np.array([5e-4, 5e-4, math.radians(1.0)]))
    loosen_increment: float = math.radians(15.0)
    probe_standoff: float = 0.004
    engage_margin: float = 0.0015  # grip compatibility allowance vs aperture
    stage_ang: float = math.radians(6.0)
    stage_lat: float = 0.002       # staging corridor half-width


# ---------------------------------------------------------------------------
# Basis functions
# ---------------------------------------------------------------------------

def _basis_centers(n: int = N_BASIS):
    t = np.linspace(0.0, 1.0, n)
    c = np.exp(-ALPHA_S * t)
    h = 1.0 / np.diff(c, append=c[-1] * 0.5) ** 2
    return c, np.abs(h)


_CENTERS, _WIDTHS = _basis_centers()


def forcing_term(beta: np.ndarray, s) -> np.ndarray:
    """Normalized radial-basis forcing, gated by the phase variable s."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    psi = np.exp(-_WIDTHS[None, :] * (s[:, None] - _CENTERS[None, :]) ** 2)
    w = psi / psi.sum(axis=1, keepdims=True) * s[:, None]
    out = w @ beta
    return out


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout_batch(betas: np.ndarray, dp: DmpParams, theta: Pose2,
                  shape: CompositeShape, tool: ToolPointCloud,
                  params: PotentialParams, fp: FrictionParams,
                  cfg: PlannerConfig, solver: SolverConfig,
                  z0: Pose2 = None, v0: np.ndarray = None):
    """Integrate the coupled command/state/haptic-cost system for a stack of
    forcing weights.  Returns (u_traj (R,T+1,3), z_traj, psi (R,), ok (R,)).

    Rollouts that cross a haptic obstacle are frozen where they stood and
    marked infeasible.
    """
    R = betas.shape[0]
    n_steps = max(1, int(round(cfg.horizon / cfg.dt)))
    tau, a1, a2 = dp.tau, dp.alpha1, dp.alpha2
    uT = dp.uT.as_array()
    u = np.tile(dp.u0.as_array(), (R, 1))
    z = np.tile((z0 or dp.u0).as_array(), (R, 1))
    v = np.tile(np.zeros(3) if v0 is None else np.asarray(v0, float), (R, 1))
    s = np.ones(R)
    psi = np.zeros(R)
    ok = np.ones(R, dtype=bool)
    u_traj = np.empty((R, n_steps + 1, 3))
    z_traj = np.empty((R, n_steps + 1, 3))
    u_traj[:, 0] = u
    z_traj[:, 0] = z
    th = np.tile(theta.as_array(), (R, 1))
    dt = cfg.dt

    def deriv(u_, v_, z_, s_, alive):
        du = v_ / tau
        f = np.einsum("rb,rbk->rk", _phase_weights(s_), betas)
        diff = uT - u_
        diff[:, 2] = (diff[:, 2] + math.pi) % (2.0 * math.pi) - math.pi
        dv = (a1 * (a2 * diff - v_) + f) / tau
        ds = -ALPHA_S * s_ / tau
        dz = np.zeros_like(z_)
        G_ok = np.ones(len(u_), dtype=bool)
        if alive.any():
            zdot, det = manifold_rhs_batch(
                z_[alive], u_[alive], du[alive], th[alive], shape, tool,
                params, fp, solver, check_obstacle=False)
            dz[alive] = zdot
            G_ok[alive] = det >= solver.lambda_obs
        return du, dv, dz, ds, G_ok

    for k in range(n_steps):
        alive = ok
        du1, dv1, dz1, ds1, ok1 = deriv(u, v, z, s, alive)
        du2, dv2, dz2, ds2, ok2 = deriv(u + 0.5 * dt * du1, v + 0.5 * dt * dv1,
                                        z + 0.5 * dt * dz1, s + 0.5 * dt * ds1,
                                        alive)
        du3, dv3, dz3, ds3, ok3 = deriv(u + 0.5 * dt * du2, v + 0.5 * dt * dv2,
                                        z + 0.5 * dt * dz2, s + 0.5 * dt * ds2,
                                        alive)
        du4, dv4, dz4, ds4, ok4 = deriv(u + dt * du3, v + dt * dv3,
                                        z + dt * dz3, s + dt * ds3, alive)
        step_ok = ok1 & ok2 & ok3 & ok4
        adv = alive & step_ok
        u = np.where(adv[:, None], u + dt / 6 * (du1 + 2 * du2 + 2 * du3 + du4), u)
        v = np.where(adv[:, None], v + dt / 6 * (dv1 + 2 * dv2 + 2 * dv3 + dv4), v)
        z = np.where(adv[:, None], z + dt / 6 * (dz1 + 2 * dz2 + 2 * dz3 + dz4), z)
        s = np.where(adv, s + dt / 6 * (ds1 + 2 * ds2 + 2 * ds3 + ds4), s)
        # Accumulate the haptic running cost at the new state.
        if adv.any():
            from .potential import eval_potential
            ev = eval_potential(z[adv], u[adv], th[adv], shape, tool, params)
            G = haptic_metric_batch(ev.hess_zz, params.Kc)
            if cfg.metric_power == 2:
                Gp = np.matmul(G, G)
            else:
                Gp = G
            vv = v[adv] / tau
            quad = np.einsum("ri,rij,rj->r", vv, Gp, vv)
            psi[adv] += np.sqrt(np.maximum(quad, 0.0)) * dt
        ok = ok & step_ok
        u_traj[:, k + 1] = u
        z_traj[:, k + 1] = z
    return u_traj, z_traj, psi, ok


def _phase_weights(s: np.ndarray) -> np.ndarray:
    psi = np.exp(-_WIDTHS[None, :] * (s[:, None] - _CENTERS[None, :]) ** 2)
    return psi / psi.sum(axis=1, keepdims=True) * s[:, None]


def dmp_rollout(dp: DmpParams, theta: Pose2, shape: CompositeShape,
                tool: ToolPointCloud, params: PotentialParams,
                fp: FrictionParams, cfg: PlannerConfig = PlannerConfig(),
                solver: SolverConfig = SolverConfig(), z0: Pose2 = None,
                z_tgt: Pose2 = None) -> Rollout:
    """Roll out one policy; cost = accumulated haptic cost + terminal error."""
    u_traj, z_traj, psi, ok = rollout_batch(
        dp.beta[None], dp, theta, shape, tool, params, fp, cfg, solver, z0=z0)
    tgt = (z_tgt or dp.uT).as_array()
    cost = float(psi[0]) + _terminal_cost(z_traj[0, -1], tgt, cfg)
    if not ok[0]:
        cost = math.inf
    return Rollout(u_traj=u_traj[0], z_traj=z_traj[0], psi_final=float(psi[0]),
                   cost=cost, feasible=bool(ok[0]), n_steps=u_traj.shape[1] - 1)


def _terminal_cost(z_end, tgt, cfg: PlannerConfig) -> float:
    d = z_end - tgt
    d[2] = wrap_angle(d[2])
    return float(d @ (d / cfg.terminal_sigma))


# ---------------------------------------------------------------------------
# Elite averaging
# ---------------------------------------------------------------------------

def elite_step(beta: np.ndarray, lam_std: np.ndarray, n_rollouts: int,
               elite_frac: float, cost_fn, rng: np.random.Generator):
    """Generic sampled elite average over perturbed weight matrices.

    cost_fn maps a stacked (R, *beta.shape) array to (costs (R,),
    feasible (R,)).  Infeasible samples never enter the elite set; if all
    are infeasible AllInfeasible is raised.  Deterministic for a given rng
    state.
    """
    noise = rng.standard_normal((n_rollouts,) + beta.shape)
    betas = beta[None] + noise * lam_std[None]
    costs, ok = cost_fn(betas)
    if not ok.any():
        raise AllInfeasible("every rollout crossed a haptic obstacle")
    idx = np.nonzero(ok)[0]
    order = idx[np.argsort(costs[idx], kind="stable")]
    n_elite = max(1, int(round(elite_frac * len(order))))
    elite = betas[order[:n_elite]]
    if np.all(elite == elite[0]):
        return elite[0], order[:n_elite], costs
    return elite.mean(axis=0), order[:n_elite], costs


def mppi_plan(dp: DmpParams, Lambda, theta_star: Pose2, shape: CompositeShape,
              tool: ToolPointCloud, params: PotentialParams,
              fp: FrictionParams, z_tgt: Pose2, rng: np.random.Generator,
              cfg: PlannerConfig = PlannerConfig(),
              solver: SolverConfig = SolverConfig(), z0: Pose2 = None):
    """One planning iteration: sample, roll out, elite-average.

    Lambda may be a scalar std, a per-dimension (3,) std, or a full
    (N_BASIS, 3) std array for the forcing-weight perturbations.  Returns
    (DmpParams with updated weights, info dict).
    """
    lam = np.broadcast_to(np.asarray(Lambda, dtype=float), dp.beta.shape)
    tgt = (z_tgt or dp.uT).as_array()

    def cost_fn(betas):
        u_t, z_t, psi, ok = rollout_batch(betas, dp, theta_star, shape, tool,
                                          params, fp, cfg, solver, z0=z0)
        term = np.array([_terminal_cost(z_t[r, -1], tgt.copy(), cfg)
                         for r in range(len(betas))])
        return psi + term, ok

    beta_new, elite_idx, costs = elite_step(dp.beta, lam, cfg.n_rollouts,
                                            cfg.elite_frac, cost_fn, rng)
    info = {"costs": costs, "elite": elite_idx}
    return replace(dp, beta=beta_new), info


def default_exploration(dp: DmpParams, cfg: PlannerConfig) -> np.ndarray:
    """Per-dimension exploration std from the start-to-goal distance."""
    span = np.abs(dp.uT.as_array() - dp.u0.as_array())
    span[2] = abs(wrap_angle(dp.uT.phi - dp.u0.phi))
    return np.maximum(cfg.exploration_frac * span, cfg.exploration_floor)


# ---------------------------------------------------------------------------
# Target selection
# ---------------------------------------------------------------------------

def engagement_angles(shape: CompositeShape, tool: ToolPointCloud,
                      margin: float):
    """Tool grip orientations relative to the shape frame.

    Each slab the jaw can span (grip width + margin <= aperture)
    contributes its jaw-normal angle and its opposite.  Raises
    IncompatibleGeometry when no slab fits.
    """
    out = []
    for half_width, normal_angle in shape.engagement_half_widths():
        if 2.0 * half_width + margin <= tool.aperture:
            a = normal_angle - math.pi / 2.0
            out.extend([a, a + math.pi])
    if not out:
        raise IncompatibleGeometry(
            f"{shape.label}: no grip span fits aperture {tool.aperture:.4f}")
    return sorted(wrap_angle(a) for a in out)


def select_target(shape: CompositeShape, theta_star: Pose2,
                  tool: ToolPointCloud, phase: str, current: Pose2,
                  cfg: PlannerConfig = PlannerConfig()):
    """Engagement / loosening target for the current MAP estimate.

    Insertion is staged: until the tool is aligned with the engagement axis
    and sitting on it, the target is a staging pose backed off from the
    believed object; from the staging region the target is the concentric
    engagement pose, a slide along the tool's own axis.  A direct diagonal
    command would cut through the believed geometry and every rollout would
    (correctly) score it as a collision.

    Returns (u_T, z_tgt, mode); mode "probe" means the shape cannot be
    gripped and the target holds the jaw mouth at the contact boundary.
    """
    from .geometry import shape_circumradius
    center = np.array([theta_star.x, theta_star.y])
    mouth_reach = float(tool.points[:, 0].max())
    try:
        angles = engagement_angles(shape, tool, cfg.engage_margin)
    except IncompatibleGeometry:
        # Hold-and-probe in front of the boundary along the current axis.
        reach = shape_circumradius(shape) + cfg.probe_standoff + mouth_reach
        d = np.array([math.cos(current.phi), math.sin(current.phi)])
        pos = center - reach * d
        tgt = Pose2(pos[0], pos[1], current.phi)
        return tgt, tgt, "probe"

    if phase == "insertion":
        cands = [theta_star.phi + a for a in angles]
        phi = min(cands, key=lambda a: abs(wrap_angle(a - current.phi)))
        phi = wrap_angle(phi)
        axis = np.array([math.cos(phi), math.sin(phi)])
        stage_dist = shape_circumradius(shape) + mouth_reach + cfg.probe_standoff
        staging = center - stage_dist * axis
        rel = np.array([current.x, current.y]) - staging
        along = float(rel @ axis)
        lateral = abs(float(rel[0] * axis[1] - rel[1] * axis[0]))
        aligned = (abs(wrap_angle(current.phi - phi)) < cfg.stage_ang
                   and lateral < cfg.stage_lat and along > -0.5 * stage_dist)
        if aligned:
            tgt = Pose2(center[0], center[1], phi)
            return tgt, tgt, "insert"
        tgt = Pose2(staging[0], staging[1], phi)
        return tgt, tgt, "stage"
    # Loosening: rotate the engaged tool (and the screw with it) by the
    # configured increment.
    phi = current.phi + cfg.loosen_increment
    tgt = Pose2(center[0], center[1], wrap_angle(phi))
    return tgt, tgt, "loosen"
