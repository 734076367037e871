"""Equilibrium solving and quasi-static motion on the manifold.

The forward model: tool state z follows the implicit manifold dW/dz = 0
under command motion u(t).  A damped Newton solver finds equilibria; an
RK4 integrator advances the coupled ODE, optionally with a regularized
Coulomb friction correction evaluated from the frictionless predictor
velocity (predictor-corrector, no fixed-point iteration).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularHessian
from .geometry import CompositeShape, Pose2, ToolPointCloud, rot2
from .potential import PotentialParams, eval_potential


@dataclass(frozen=True)
class FrictionParams:
    mu: float = 0.0
    b: float = 100.0
    enabled: bool = False

    def __post_init__(self):
        if self.mu < 0 or self.b <= 0:
            raise ValueError("need mu >= 0 and b > 0")


@dataclass
class EquilibriumState:
    z_star: Pose2
    residual_norm: float
    converged: bool
    det_hess_zz: float


@dataclass(frozen=True)
class SolverConfig:
    tol_eq: float = 1e-8
    max_iters: int = 200
    lambda_obs: float = 1.0
    eta: float = 50.0
    dt: float = 1e-3
    step_max: float = 0.05          # trust cap on Newton steps (m / rad)
    # Ground-truth integration only: eigenvalue floor applied to hess_zz
    # when its determinant sags below reg_gate, letting the world pass
    # through snap-through configurations that the spec-level ODE refuses.
    reg_floor: float = 20.0
    reg_gate: float = 1e4
    v_cap_lin: float = 1.0          # stage-velocity safety caps
    v_cap_ang: float = 30.0


def mixed_norm(wrench: np.ndarray, char_length: float) -> np.ndarray:
    """Force/torque mixed norm sqrt(fx^2 + fy^2 + (tau/L)^2)."""
    w = np.asarray(wrench, dtype=float)
    return np.hypot(np.hypot(w[..., 0], w[..., 1]), w[..., 2] / char_length)


def solve_equilibrium_batch(z0: np.ndarray, u: np.ndarray, theta: np.ndarray,
                            shape: CompositeShape, tool: ToolPointCloud,
                            params: PotentialParams, cfg: SolverConfig):
    """Damped Newton solve of dW/dz = 0 for a stack of configurations.

    Returns (z (B,3), residual (B,), converged (B,), det_hess (B,)).
    Elements whose Hessian dips under lambda_obs fall back to scaled
    gradient descent for that iteration.
    """
    z = np.atleast_2d(np.array(z0, dtype=float, copy=True))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    B = z.shape[0]
    L = tool.char_length

    def value(zz):
        return eval_potential(zz, u, theta, shape, tool, params,
                              value_only=True).W

    ev = eval_potential(z, u, theta, shape, tool, params)
    res = mixed_norm(ev.grad_z, L)
    with np.errstate(over="ignore"):
        det = np.linalg.det(ev.hess_zz)
    W_cur = value(z)
    active = res >= cfg.tol_eq

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        g = ev.grad_z
        H = ev.hess_zz
        ok = (det > cfg.lambda_obs) & np.isfinite(det)
        step = np.empty_like(z)
        if ok.any():
            step[ok] = np.linalg.solve(H[ok], -g[ok, :, None])[..., 0]
            # Newton directions must descend; near-indefinite Hessians can
            # pass the determinant gate with an uphill solution.
            bad = ok.copy()
            bad[ok] = (step[ok] * g[ok]).sum(axis=1) >= 0
            ok = ok & ~bad
        if (~ok).any():
            # normalized gradient descent fallback near haptic obstacles
            gn = np.linalg.norm(g[~ok], axis=1) + 1e-300
            step[~ok] = -g[~ok] / gn[:, None] * cfg.step_max
        norm = np.linalg.norm(step, axis=1)
        too_big = norm > cfg.step_max
        step[too_big] *= (cfg.step_max / norm[too_big])[:, None]

        # Backtracking on W.  Steps too small for W differences to resolve
        # in float are accepted outright (Newton is locally exact there);
        # everything else must strictly descend.
        alpha = np.where(active, 1.0, 0.0)
        accept = ~active | (norm < 1e-7)
        z_new = z + alpha[:, None] * step
        for _ in range(12):
            pending = ~accept
            if not pending.any():
                break
            cand = z + alpha[:, None] * step
            W_c = value(cand)
            good = pending & (W_c <= W_cur * (1 + 1e-14) + 1e-300)
            z_new[good] = cand[good]
            accept |= good
            alpha = np.where(pending & ~good, 0.5 * alpha, alpha)
        stalled = ~accept
        z_new[stalled] = z[stalled]

        move = active & accept
        z[move] = z_new[move]
        ev = eval_potential(z, u, theta, shape, tool, params)
        res = mixed_norm(ev.grad_z, L)
        with np.errstate(over="ignore"):
            det = np.linalg.det(ev.hess_zz)
        W_cur = value(z)
        active = (res >= cfg.tol_eq) & ~stalled

    return z, res, res < cfg.tol_eq, det


def solve_equilibrium(z0: Pose2, u: Pose2, theta: Pose2,
                      shape: CompositeShape, tool: ToolPointCloud,
                      params: PotentialParams,
                      cfg: SolverConfig = SolverConfig()) -> EquilibriumState:
    """Find the equilibrium tool pose for a command u and object pose theta."""
    z, res, conv, det = solve_equilibrium_batch(
        z0.as_array(), u.as_array(), theta.as_array(), shape, tool, params, cfg)
    return EquilibriumState(z_star=Pose2.from_array(z[0]),
                            residual_norm=float(res[0]),
                            converged=bool(conv[0]),
                            det_hess_zz=float(det[0]))


# ---------------------------------------------------------------------------
# Friction
# ---------------------------------------------------------------------------

def friction_sum_batch(point_h1, point_gw, point_r, z_dot, fp: FrictionParams):
    """Total generalized friction wrench per batch element.

    point_* are the per-point arrays from eval_potential(want_points=True);
    z_dot is the (B, 3) frictionless predictor velocity.  Tangential slip at
    each contact point is saturated through tanh at the Coulomb bound.
    """
    B, n = point_h1.shape
    if not fp.enabled or fp.mu == 0.0:
        return np.zeros((B, 3))
    # Normal force on the tool at each point: f_N = -h1 * grad_w.
    fn = -point_h1[..., None] * point_gw                      # (B, n, 2)
    fn_mag = np.hypot(fn[..., 0], fn[..., 1])                 # overflow-safe
    # Point velocity c_dot = v + phi_dot * J r.
    jr = np.stack([-point_r[..., 1], point_r[..., 0]], axis=-1)
    cdot = z_dot[:, None, :2] + z_dot[:, 2, None, None] * jr  # (B, n, 2)
    nhat = fn / np.maximum(fn_mag, 1e-12)[..., None]
    ctang = cdot - (cdot * nhat).sum(-1, keepdims=True) * nhat
    ct_mag = np.linalg.norm(ctang, axis=-1)
    bound = np.maximum(fp.mu * fn_mag, 1e-12)
    fmag = fp.mu * fn_mag * np.tanh(fp.b * ct_mag / bound)
    active = fn_mag >= 1e-12
    f = -fmag[..., None] * ctang / np.maximum(ct_mag, 1e-12)[..., None]
    f = np.where(active[..., None], f, 0.0)
    tau = jr[..., 0] * f[..., 0] + jr[..., 1] * f[..., 1]     # (J r) . f
    out = np.empty((B, 3))
    out[:, :2] = f.sum(axis=1)
    out[:, 2] = tau.sum(axis=1)
    return out


def friction_wrench(c_prime_i: np.ndarray, z: Pose2, z_dot_free: np.ndarray,
                    grad_ci_W: np.ndarray, fp: FrictionParams) -> np.ndarray:
    """Generalized friction wrench of a single tool point.

    grad_ci_W is the derivative of the point's contact energy with respect
    to its tool-frame coordinates; the normal force is its push-back
    -R(phi) grad_ci_W.  The tangential force saturates at mu |f_N| and the
    Cartesian force is lifted with the torque arm (J R c') . f.
    """
    r = rot2(z.phi)
    fn = -r @ np.asarray(grad_ci_W, dtype=float)
    fn_mag = math.hypot(fn[0], fn[1])
    if not fp.enabled or fn_mag < 1e-12 or fp.mu == 0.0:
        return np.zeros(3)
    r_off = r @ np.asarray(c_prime_i, dtype=float)
    jr = np.array([-r_off[1], r_off[0]])
    cdot = np.asarray(z_dot_free[:2], dtype=float) + z_dot_free[2] * jr
    nhat = fn / fn_mag
    ctang = cdot - (cdot @ nhat) * nhat
    ct_mag = max(float(np.linalg.norm(ctang)), 1e-12)
    bound = max(fp.mu * fn_mag, 1e-12)
    fmag = fp.mu * fn_mag * math.tanh(fp.b * ct_mag / bound)
    f = -fmag * ctang / ct_mag
    return np.array([f[0], f[1], jr @ f])


# ---------------------------------------------------------------------------
# Manifold ODE
# ---------------------------------------------------------------------------

def manifold_rhs_batch(z: np.ndarray, u: np.ndarray, u_dot: np.ndarray,
                       theta: np.ndarray, shape: CompositeShape,
                       tool: ToolPointCloud, params: PotentialParams,
                       fp: FrictionParams, cfg: SolverConfig,
                       check_obstacle: bool = True, regularize: bool = False):
    """Right-hand side z_dot = -Hzz^-1 [Huz u_dot + eta (dW/dz - F_fri)].

    With the spring the only coupling, Huz u_dot = -Kc u_dot.  Friction is
    evaluated from the frictionless predictor velocity at the same state.
    Returns (z_dot (B,3), det (B,)).

    regularize=True (ground-truth world) floors the Hessian spectrum near
    haptic obstacles instead of raising, and caps stage velocities; the
    quasi-static model is singular at snap-through, where a physical tool
    would accelerate, so the floored flow stands in for that transient.
    """
    want_pts = fp.enabled and fp.mu > 0.0
    ev = eval_potential(z, u, theta, shape, tool, params, want_points=want_pts)
    H = ev.hess_zz
    with np.errstate(over="ignore"):
        det = np.linalg.det(H)
    if regularize:
        risky = ~(det > cfg.reg_gate)
        if risky.any():
            H = np.nan_to_num(H, nan=0.0, posinf=1e12, neginf=-1e12)
            with np.errstate(over="ignore", invalid="ignore"):
                lam = np.linalg.eigvalsh(H[risky])[:, 0]
            shift = np.maximum(cfg.reg_floor - lam, 0.0)
            H = H.copy()
            H[risky] += shift[:, None, None] * np.eye(3)
    elif check_obstacle and np.any(det < cfg.lambda_obs):
        raise SingularHessian(f"det(hess_zz) min {det.min():.3e} < "
                              f"{cfg.lambda_obs:.3e}")
    elif not check_obstacle:
        # Rollout mode: obstacle elements are culled by the caller from the
        # returned determinant, but the solve itself must stay defined.
        dead = ~(np.abs(det) > 1e-12) | ~np.isfinite(det)
        if dead.any():
            H = H.copy()
            H[dead] = np.eye(3)
    ku = u_dot @ params.Kc.T
    rhs_free = ku - cfg.eta * ev.grad_z
    z_dot_free = np.linalg.solve(H, rhs_free[..., None])[..., 0]
    if regularize:
        z_dot_free = _cap_velocity(z_dot_free, cfg)
    if not want_pts:
        return z_dot_free, det
    ffr = friction_sum_batch(ev.point_h1, ev.point_grad_w, ev.point_r,
                             z_dot_free, fp)
    z_dot = np.linalg.solve(
        H, (ku - cfg.eta * (ev.grad_z - ffr))[..., None])[..., 0]
    if regularize:
        z_dot = _cap_velocity(z_dot, cfg)
    return z_dot, det


def _cap_velocity(z_dot: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    vlin = np.hypot(z_dot[:, 0], z_dot[:, 1])
    fac = np.minimum(1.0, cfg.v_cap_lin / np.maximum(vlin, 1e-300))
    out = z_dot * fac[:, None]
    out[:, 2] = np.clip(out[:, 2], -cfg.v_cap_ang, cfg.v_cap_ang)
    return out


def rk4_step_batch(z, u, u_dot, theta, shape, tool, params, fp, cfg, dt,
                   u_next=None, regularize=False):
    """Classical RK4 step of the manifold ODE.

    The command advances linearly within the step: u(t + s) = u + s u_dot
    (u_next, when given, pins the endpoint to avoid drift).
    """
    u_mid = u + 0.5 * dt * u_dot
    u_end = u + dt * u_dot if u_next is None else u_next

    k1, det = manifold_rhs_batch(z, u, u_dot, theta, shape, tool, params,
                                 fp, cfg, regularize=regularize)
    k2, _ = manifold_rhs_batch(z + 0.5 * dt * k1, u_mid, u_dot, theta, shape,
                               tool, params, fp, cfg, regularize=regularize)
    k3, _ = manifold_rhs_batch(z + 0.5 * dt * k2, u_mid, u_dot, theta, shape,
                               tool, params, fp, cfg, regularize=regularize)
    k4, _ = manifold_rhs_batch(z + dt * k3, u_end, u_dot, theta, shape,
                               tool, params, fp, cfg, regularize=regularize)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), det


_NO_FRICTION = FrictionParams(mu=0.0, b=1.0, enabled=False)


def adaptive_ode_step(z: Pose2, u: Pose2, u_dot: np.ndarray, theta: Pose2,
                      shape: CompositeShape, tool: ToolPointCloud,
                      params: PotentialParams, eta: float, dt: float,
                      cfg: SolverConfig = SolverConfig()) -> Pose2:
    """One frictionless RK4 step along the manifold."""
    cfg = SolverConfig(tol_eq=cfg.tol_eq, max_iters=cfg.max_iters,
                       lambda_obs=cfg.lambda_obs, eta=eta, dt=dt)
    z_new, _ = rk4_step_batch(z.as_array()[None], u.as_array()[None],
                              np.asarray(u_dot, dtype=float)[None],
                              theta.as_array()[None], shape, tool, params,
                              _NO_FRICTION, cfg, dt)
    return Pose2.from_array(z_new[0])


def friction_ode_step(z: Pose2, u: Pose2, u_dot: np.ndarray, theta: Pose2,
                      shape: CompositeShape, tool: ToolPointCloud,
                      params: PotentialParams, fp: FrictionParams, eta: float,
                      dt: float, cfg: SolverConfig = SolverConfig()) -> Pose2:
    """One RK4 step with the dissipative friction correction."""
    cfg = SolverConfig(tol_eq=cfg.tol_eq, max_iters=cfg.max_iters,
                       lambda_obs=cfg.lambda_obs, eta=eta, dt=dt)
    z_new, _ = rk4_step_batch(z.as_array()[None], u.as_array()[None],
                              np.asarray(u_dot, dtype=float)[None],
                              theta.as_array()[None], shape, tool, params,
                              fp, cfg, dt)
    return Pose2.from_array(z_new[0])
