"""Hybrid haptic estimation: discrete shape hypotheses, continuous poses.

Each shape hypothesis carries a bank of pose particles refined per batch by
damped least squares on the wrench residual (M-step), summarized by greedy
clustering, and scored into the shape posterior (E-step).  The residual
Jacobian comes from implicit differentiation of the equilibrium condition,
so only conservative terms enter it; friction in the data shows up as
(small) unmodeled noise.

Sign conventions: the observed wrench is the contact wrench acting on the
tool (what the simulated sensor reports), so at a single contact the object
surface normal is aligned with the measured force.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BelowContactThreshold, NoFeasibleHypothesis, StepRejected
from .geometry import (CompositeShape, Pose2, ToolPointCloud, boundary_points,
                       composite_eval, rot2, wrap_angle)
from .dynamics import SolverConfig, solve_equilibrium_batch
from .potential import PotentialParams, eval_potential

WRENCH_AXIS_EPS = 1e-9


@dataclass(frozen=True)
class Wrench2:
    fx: float
    fy: float
    tau: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.fx, self.fy, self.tau])):
            raise ValueError("wrench components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.tau])

    @staticmethod
    def from_array(a) -> "Wrench2":
        return Wrench2(float(a[0]), float(a[1]), float(a[2]))

    @property
    def force_norm(self) -> float:
        return math.hypot(self.fx, self.fy)


@dataclass(frozen=True)
class MeasurementModel:
    """Gaussian wrench-noise model with covariance Sigma."""

    Sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.Sigma, dtype=float).reshape(3, 3)
        if not np.allclose(s, s.T) or np.linalg.eigvalsh(s).min() <= 0:
            raise ValueError("Sigma must be symmetric positive definite")
        s.setflags(write=False)
        object.__setattr__(self, "Sigma", s)
        inv = np.linalg.inv(s)
        inv.setflags(write=False)
        object.__setattr__(self, "_inv", inv)

    @property
    def Sigma_inv(self) -> np.ndarray:
        return self._inv

    @staticmethod
    def isotropic(sigma_f: float, char_length: float) -> "MeasurementModel":
        """Force noise sigma_f on both axes; torque scaled by the tool length."""
        return MeasurementModel(np.diag([sigma_f ** 2, sigma_f ** 2,
                                         (sigma_f * char_length) ** 2]))


@dataclass
class PoseParticle:
    theta: Pose2
    local_cost: float = 0.0
    converged: bool = True
    lm_lambda: float = 1e-2


@dataclass
class ShapeParticle:
    shape_id: int
    weight: float
    log_weight: float
    pose_particles: list
    theta_star: Pose2 = None
    Sigma_theta: np.ndarray = None
    batch_cost: float = math.inf
    failed: bool = False


@dataclass
class HypothesisSet:
    shapes: list
    map_index: int = 0

    @property
    def map_shape(self) -> ShapeParticle:
        return self.shapes[self.map_index]

    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.shapes])


@dataclass
class Batch:
    """One estimation window: command poses, observed wrenches, and the
    impedance stiffness active when each sample was taken."""

    u: np.ndarray                      # (N, 3)
    wrench: np.ndarray                 # (N, 3)
    params_seq: list                   # N PotentialParams references
    index: int = 0

    def __len__(self):
        return self.u.shape[0]

    @property
    def pairs(self):
        return [(Pose2.from_array(self.u[i]), Wrench2.from_array(self.wrench[i]))
                for i in range(len(self))]

    def param_groups(self):
        """Contiguous runs of identical potential parameters."""
        out = []
        start = 0
        for i in range(1, len(self) + 1):
            if i == len(self) or self.params_seq[i] is not self.params_seq[start]:
                out.append((self.params_seq[start], slice(start, i)))
                start = i
        return out

    def observed_tool_poses(self) -> np.ndarray:
        """Tool poses implied by the impedance relation F = -Kc (u - z)."""
        out = np.empty_like(self.u)
        for params, sl in self.param_groups():
            out[sl] = self.u[sl] + np.linalg.solve(
                params.Kc, self.wrench[sl].T).T
        return out


@dataclass(frozen=True)
class EstimatorConfig:
    n_pose_particles: int = 10
    lm_lambda0: float = 1e-2
    lm_lambda_min: float = 1e-6
    lm_lambda_max: float = 1e3
    lm_max_retries: int = 3
    lm_iters_per_batch: int = 2
    lm_step_pos: float = 0.005      # per-update trust caps
    lm_step_ang: float = math.radians(10.0)
    cluster_r_t: float = 0.003
    cluster_r_a: float = math.radians(5.0)
    sigma_f: float = 0.2
    # The scoring covariance inflates the sensor noise: residuals carry
    # unmodeled systematic error (friction lag, branch selection) that
    # would otherwise collapse the shape posterior overconfidently.
    sigma_scale: float = 3.0
    f_contact_threshold: float = 0.5
    weight_log_floor: float = -700.0
    # Mahalanobis penalty per sample whose equilibrium solve did not
    # converge: a hypothesis the internal model cannot realize must score
    # as evidence against, not as a zero residual at the stalled iterate.
    fail_cost: float = 1000.0
    # Per-sample robust cap: measurement-noise jitter can hop a solve onto
    # an adjacent equilibrium branch near corners; capped residuals keep a
    # few branch outliers from drowning an otherwise consistent batch.
    sample_cost_cap: float = 300.0
    prune_to_clusters: bool = True
    solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iters=30, lambda_obs=1.0))


# ---------------------------------------------------------------------------
# Initialization from the first contact
# ---------------------------------------------------------------------------

def wrench_axis_init(wrench: Wrench2, f_threshold: float = 0.5):
    """Reference point and direction of the line of action of a wrench.

    Planar reduction of r0 = (f x tau) / (|f|^2 + eps): every point p on
    the returned line satisfies p x f = tau.  Coordinates are relative to
    the frame the torque was measured about (the tool origin).
    """
    f = np.array([wrench.fx, wrench.fy])
    fn = wrench.force_norm
    if fn <= f_threshold:
        raise BelowContactThreshold(f"|f| = {fn:.3f} N <= {f_threshold} N")
    r0 = wrench.tau / (fn * fn + WRENCH_AXIS_EPS) * np.array([f[1], -f[0]])
    return r0, f / fn


def sample_pose_hypotheses(line, tool_pose: Pose2, shape: CompositeShape,
                           tool: ToolPointCloud, n_samples: int,
                           params: PotentialParams, n_boundary: int = 144,
                           cone_deg: float = 10.0, reject_depth: float = 3.0):
    """Object poses consistent with a single contact on the wrench axis.

    Intersects the line of action with the tool point cloud to get contact
    candidates, pairs them with uniformly sampled object boundary points
    whose world normal is aligned with the measured force (the contact
    pushes the tool along the object's outward normal), and rejects poses
    that interpenetrate the tool.  A small alignment cone hedges residual
    tangential force in the measurement.
    """
    r0, fdir = line
    spacing = _cloud_spacing(tool)
    world = tool.world_points(tool_pose)
    origin = np.array([tool_pose.x, tool_pose.y]) + r0
    cone = [0.0, math.radians(cone_deg), -math.radians(cone_deg)]

    for attempt in range(2):
        dist_tol = spacing * (0.75 + 0.75 * attempt)
        nb = n_boundary * (1 + 3 * attempt)
        contacts = _line_cloud_contacts(world, origin, fdir, dist_tol)
        if len(contacts) == 0:
            continue
        bpts, bnrm = boundary_points(shape, nb)
        phi_f = math.atan2(fdir[1], fdir[0])
        cand = []
        for q in contacts:
            base = phi_f - np.arctan2(bnrm[:, 1], bnrm[:, 0])
            for off in cone:
                phis = base + off
                for j in range(len(bpts)):
                    r = rot2(phis[j])
                    t = q - r @ bpts[j]
                    cand.append((t[0], t[1], phis[j]))
        cand = np.array(cand)
        keep = _reject_interpenetrating(cand, tool_pose, shape, tool, params,
                                        reject_depth)
        cand = _dedupe_candidates(cand[keep], shape.symmetry_order)
        if len(cand) > 0:
            if len(cand) > n_samples:
                idx = np.linspace(0, len(cand) - 1, n_samples).round().astype(int)
                cand = cand[idx]
            return [Pose2.from_array(c) for c in cand]
    raise NoFeasibleHypothesis(f"no pose for shape {shape.label!r} fits the "
                               "first-contact wrench")


def _cloud_spacing(tool: ToolPointCloud) -> float:
    d = np.linalg.norm(np.diff(tool.points, axis=0), axis=1)
    return float(np.median(d))


def _line_cloud_contacts(world_pts, origin, direction, dist_tol):
    """Closest cloud point of each contiguous run near the line."""
    rel = world_pts - origin
    along = rel @ direction
    perp = np.abs(rel[:, 0] * direction[1] - rel[:, 1] * direction[0])
    near = perp < dist_tol
    contacts = []
    i = 0
    n = len(world_pts)
    while i < n:
        if not near[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and near[j + 1]:
            j += 1
        run = slice(i, j + 1)
        best = i + int(np.argmin(perp[run]))
        contacts.append(world_pts[best])
        i = j + 1
    return contacts


def _dedupe_candidates(cand, symmetry_order, pos_tol=5e-4, ang_tol=math.radians(2)):
    """Drop candidates equivalent up to tolerance and shape symmetry."""
    if len(cand) == 0:
        return cand
    period = 2.0 * math.pi / symmetry_order
    seen = {}
    for i, c in enumerate(cand):
        key = (round(c[0] / pos_tol), round(c[1] / pos_tol),
               round((c[2] % period) / ang_tol))
        if key not in seen:
            seen[key] = i
    idx = sorted(seen.values())
    return cand[idx]


def _reject_interpenetrating(cand, tool_pose, shape, tool, params,
                             depth=3.0):
    """Keep candidates where no tool point dips below -depth zeta1."""
    world = tool.world_points(tool_pose)          # (n, 2)
    C = cand.shape[0]
    cth = np.cos(cand[:, 2])
    sth = np.sin(cand[:, 2])
    rel = world[None, :, :] - cand[:, None, :2]   # (C, n, 2)
    px = cth[:, None] * rel[..., 0] + sth[:, None] * rel[..., 1]
    py = -sth[:, None] * rel[..., 0] + cth[:, None] * rel[..., 1]
    F, _, _ = composite_eval(shape, np.stack([px, py], axis=-1))
    return F.min(axis=1) > -depth * params.zeta1


def _tool_min_F(z: np.ndarray, th: np.ndarray, shape, tool) -> np.ndarray:
    """Minimum inside-outside value over tool points, per configuration."""
    cz, sz = np.cos(z[:, 2]), np.sin(z[:, 2])
    wx = cz[:, None] * tool.points[:, 0] - sz[:, None] * tool.points[:, 1] \
        + z[:, 0, None]
    wy = sz[:, None] * tool.points[:, 0] + cz[:, None] * tool.points[:, 1] \
        + z[:, 1, None]
    ct, st = np.cos(th[:, 2]), np.sin(th[:, 2])
    dx = wx - th[:, 0, None]
    dy = wy - th[:, 1, None]
    px = ct[:, None] * dx + st[:, None] * dy
    py = -st[:, None] * dx + ct[:, None] * dy
    F, _, _ = composite_eval(shape, np.stack([px, py], axis=-1))
    return F.min(axis=1)


def _retract_overlaps(z_warm: np.ndarray, th: np.ndarray, shape, tool,
                      params) -> np.ndarray:
    """Pull warm-start poses radially out of the hypothesized shape.

    A hypothesis that puts the observed tool pose in deep overlap is
    physically unreachable; solving from inside stalls on an astronomically
    steep hill.  Expanding the tool position away from the believed center
    until the overlap clears gives the solver the outside branch nearest
    the measurement.
    """
    z1 = params.zeta1
    F = _tool_min_F(z_warm, th, shape, tool)
    bad = F < -3.0 * z1
    if not bad.any():
        return z_warm
    z = z_warm.copy()
    zb = z[bad]
    thb = th[bad]
    off = zb[:, :2] - thb[:, :2]
    nrm = np.linalg.norm(off, axis=1)
    weak = nrm < 1e-6
    if weak.any():
        # concentric overlap: retract backwards along the tool axis
        off[weak] = -np.stack([np.cos(zb[weak, 2]), np.sin(zb[weak, 2])],
                              axis=1) * 1e-3
        nrm[weak] = 1e-3
    lo = np.ones(len(zb))
    hi = np.ones(len(zb))
    trial = zb.copy()
    for _ in range(8):                       # bracket: double the expansion
        hi = np.where(_still_bad(trial, thb, off, hi, shape, tool, z1),
                      hi * 1.5 + 0.2, hi)
        trial[:, :2] = thb[:, :2] + off * hi[:, None]
        if not _still_bad(trial, thb, off, hi, shape, tool, z1).any():
            break
    for _ in range(20):                      # bisect to the light-contact shell
        mid = 0.5 * (lo + hi)
        trial[:, :2] = thb[:, :2] + off * mid[:, None]
        deep = _tool_min_F(trial, thb, shape, tool) < 5.0 * z1
        lo = np.where(deep, mid, lo)
        hi = np.where(deep, hi, mid)
    zb[:, :2] = thb[:, :2] + off * hi[:, None]
    z[bad] = zb
    return z


def _still_bad(trial, thb, off, s, shape, tool, z1):
    trial = trial.copy()
    trial[:, :2] = thb[:, :2] + off * s[:, None]
    return _tool_min_F(trial, thb, shape, tool) < 5.0 * z1


# ---------------------------------------------------------------------------
# Residuals and damped least-squares pose refinement
# ---------------------------------------------------------------------------

def stacked_residuals(batch: Batch, thetas: np.ndarray, shape: CompositeShape,
                      tool: ToolPointCloud, cfg: EstimatorConfig,
                      mm: MeasurementModel = None, z_warm=None,
                      want_jac=True):
    """Wrench residuals of every (pose hypothesis, sample) pair at once.

    thetas: (P, 3).  eps_m = observed - predicted wrench at the equilibrium
    for (u_m, theta_p); J = Kc Hzz^-1 d2W/dzdtheta there (implicit
    differentiation of the equilibrium condition; friction excluded).
    Returns (eps (P,N,3), J (P,N,3,3) or None, z_star (P,N,3), conv (P,N)).

    Solves warm-start from the observed tool poses u + Kc^-1 F (or z_warm),
    retracted out of any hypothesized overlap: the branch of the possibly
    multi-valued equilibrium consistent with the measurement.  When mm is
    given, samples whose residual is a gross outlier within their batch are
    re-solved from the batch's best-fitting equilibrium, which undoes
    noise-induced hops onto adjacent branches (the batch shares one pose,
    so its samples should share one branch).
    """
    n = len(batch)
    P = thetas.shape[0]
    U = np.tile(batch.u, (P, 1))
    TH = np.repeat(thetas, n, axis=0)
    if z_warm is None:
        z_warm = np.tile(batch.observed_tool_poses(), (P, 1))
    else:
        z_warm = z_warm.reshape(P * n, 3)
    eps = np.empty((P * n, 3))
    jac = np.empty((P * n, 3, 3)) if want_jac else None
    z_out = np.empty((P * n, 3))
    conv = np.empty(P * n, dtype=bool)
    wrench_all = np.tile(batch.wrench, (P, 1))

    def solve_eval(idx, zw, params):
        z, _, ok, _ = solve_equilibrium_batch(
            zw, U[idx], TH[idx], shape, tool, params, cfg.solver)
        ev = eval_potential(z, U[idx], TH[idx], shape, tool, params,
                            want_theta=want_jac)
        eps[idx] = wrench_all[idx] + ev.grad_u
        if want_jac:
            with np.errstate(over="ignore"):
                sol = np.linalg.solve(ev.hess_zz, ev.hess_ztheta)
            jac[idx] = params.Kc @ sol
        z_out[idx] = z
        conv[idx] = ok

    for params, sl in batch.param_groups():
        idx = np.concatenate([np.arange(p * n + sl.start, p * n + sl.stop)
                              for p in range(P)])
        zw = _retract_overlaps(z_warm[idx], TH[idx], shape, tool, params)
        solve_eval(idx, zw, params)

    if mm is not None:
        m = np.einsum("ki,ij,kj->k", eps, mm.Sigma_inv, eps).reshape(P, n)
        best = np.argmin(m, axis=1)
        retry = (m > cfg.sample_cost_cap) & conv.reshape(P, n)
        retry[np.arange(P), best] = False
        if retry.any():
            m_flat = m.reshape(-1)
            eps_old = eps.copy()
            jac_old = None if jac is None else jac.copy()
            z_old = z_out.copy()
            conv_old = conv.copy()
            z_best = z_out.reshape(P, n, 3)[np.arange(P), best]
            for params, sl in batch.param_groups():
                sel = np.zeros((P, n), dtype=bool)
                sel[:, sl] = retry[:, sl]
                flat = np.nonzero(sel.reshape(-1))[0]
                if len(flat) == 0:
                    continue
                zw = z_best[flat // n]
                solve_eval(flat, zw, params)
                m_new = np.einsum("ki,ij,kj->k", eps[flat], mm.Sigma_inv,
                                  eps[flat])
                worse = m_new >= m_flat[flat]
                wi = flat[worse]
                eps[wi] = eps_old[wi]
                if jac is not None:
                    jac[wi] = jac_old[wi]
                z_out[wi] = z_old[wi]
                conv[wi] = conv_old[wi]

    return (eps.reshape(P, n, 3),
            None if jac is None else jac.reshape(P, n, 3, 3),
            z_out.reshape(P, n, 3), conv.reshape(P, n))


def residual_and_jacobian(u: Pose2, observed: Wrench2, theta: Pose2,
                          shape: CompositeShape, tool: ToolPointCloud,
                          params: PotentialParams, mm: MeasurementModel,
                          cfg: EstimatorConfig = EstimatorConfig()):
    """Single-sample residual and pose Jacobian (see stacked_residuals)."""
    batch = Batch(u=u.as_array()[None], wrench=observed.as_array()[None],
                  params_seq=[params])
    eps, jac, _, conv = stacked_residuals(batch, theta.as_array()[None],
                                          shape, tool, cfg, mm)
    return eps[0, 0], jac[0, 0]


def batch_cost(eps: np.ndarray, mm: MeasurementModel) -> np.ndarray:
    """Sum of squared Mahalanobis residuals; eps (..., N, 3) -> (...)."""
    return np.einsum("...ni,ij,...nj->...", eps, mm.Sigma_inv, eps)


def robust_batch_cost(eps: np.ndarray, conv: np.ndarray,
                      mm: MeasurementModel, cfg: EstimatorConfig) -> np.ndarray:
    """Capped per-sample Mahalanobis cost plus failed-solve penalties."""
    m = np.einsum("...ni,ij,...nj->...n", eps, mm.Sigma_inv, eps)
    m = np.minimum(m, cfg.sample_cost_cap)
    return m.sum(axis=-1) + cfg.fail_cost * (~conv).sum(axis=-1)


def lm_refine(batch: Batch, thetas: np.ndarray, lams: np.ndarray,
              shape: CompositeShape, tool: ToolPointCloud,
              mm: MeasurementModel, cfg: EstimatorConfig):
    """Damped least-squares refinement of a stack of pose hypotheses.

    Per hypothesis: solve (J^T S^-1 J + lam I) d = J^T S^-1 eps, step theta
    -> theta - d under trust caps, accept only on batch-cost decrease (then
    lam /= 10, else lam *= 10 and retry).  All hypotheses advance in
    lockstep so the equilibrium solves stay batched.  Returns
    (thetas, costs, lams, accepted) arrays.
    """
    P = thetas.shape[0]
    thetas = thetas.copy()
    lams = lams.copy()
    accepted = np.zeros(P, dtype=bool)
    eye = np.eye(3)
    si = mm.Sigma_inv
    costs = np.full(P, math.inf)
    Z = None
    for _ in range(cfg.lm_iters_per_batch):
        eps, jac, Z, conv = stacked_residuals(batch, thetas, shape, tool,
                                              cfg, mm, Z)
        costs = robust_batch_cost(eps, conv, mm, cfg)
        A = np.einsum("pnji,jk,pnkl->pil", jac, si, jac)
        b = np.einsum("pnji,jk,pnk->pi", jac, si, eps)
        pend = np.ones(P, dtype=bool)
        moved = np.zeros(P, dtype=bool)
        for _retry in range(cfg.lm_max_retries + 1):
            if not pend.any():
                break
            idx = np.nonzero(pend)[0]
            Al = A[idx] + lams[idx, None, None] * eye
            delta = np.linalg.solve(Al, b[idx, :, None])[..., 0]
            dxy = np.hypot(delta[:, 0], delta[:, 1])
            scale = np.minimum(1.0, np.minimum(
                cfg.lm_step_pos / np.maximum(dxy, 1e-12),
                cfg.lm_step_ang / np.maximum(np.abs(delta[:, 2]), 1e-12)))
            delta = delta * scale[:, None]
            th_c = thetas[idx] - delta
            eps_c, _, Z_c, conv_c = stacked_residuals(
                batch, th_c, shape, tool, cfg, mm, Z[idx], want_jac=False)
            cost_c = robust_batch_cost(eps_c, conv_c, mm, cfg)
            good = cost_c < costs[idx]
            gi = idx[good]
            thetas[gi] = th_c[good]
            costs[gi] = cost_c[good]
            Z[gi] = Z_c[good]
            lams[gi] = np.maximum(lams[gi] / 10.0, cfg.lm_lambda_min)
            bi = idx[~good]
            lams[bi] = np.minimum(lams[bi] * 10.0, cfg.lm_lambda_max)
            moved[gi] = True
            pend[gi] = False
        accepted |= moved
        if not moved.any():
            break
    return thetas, costs, lams, accepted


def lm_pose_update(batch: Batch, theta: Pose2, shape: CompositeShape,
                   tool: ToolPointCloud, mm: MeasurementModel,
                   lambda_lm: float, cfg: EstimatorConfig = EstimatorConfig()):
    """Single-hypothesis damped least-squares step (see lm_refine).

    Returns (theta_new, cost, lambda_new, accepted); on rejection after all
    retries the input pose is returned unchanged.
    """
    one = EstimatorConfig(**{**cfg.__dict__, "lm_iters_per_batch": 1})
    thetas, costs, lams, acc = lm_refine(
        batch, theta.as_array()[None], np.array([lambda_lm]), shape, tool,
        mm, one)
    return (Pose2.from_array(thetas[0]), float(costs[0]), float(lams[0]),
            bool(acc[0]))


# ---------------------------------------------------------------------------
# Clustering and the shape posterior
# ---------------------------------------------------------------------------

def wrap_symmetric(dphi, symmetry_order: int):
    """Wrap an angle difference into the shape's symmetry sector."""
    period = 2.0 * math.pi / symmetry_order
    return (dphi + period / 2.0) % period - period / 2.0


def cluster_poses(particles, radius, symmetry_order: int = 1):
    """Greedy clustering of pose particles.

    radius = (r_t meters, r_a radians).  Angle differences are taken modulo
    the shape's rotational symmetry.  Returns (theta_star, Sigma_theta,
    dominant_count, clusters) where clusters is a list of index lists and
    theta_star is the lowest-cost member of the largest cluster.
    """
    if len(particles) == 0:
        raise ValueError("cannot cluster an empty particle list")
    r_t, r_a = radius
    order = sorted(range(len(particles)),
                   key=lambda i: (particles[i].local_cost, i))
    assigned = [False] * len(particles)
    clusters = []
    for seed in order:
        if assigned[seed]:
            continue
        ts = particles[seed].theta
        members = []
        for i in order:
            if assigned[i]:
                continue
            ti = particles[i].theta
            dxy = math.hypot(ti.x - ts.x, ti.y - ts.y)
            da = wrap_symmetric(ti.phi - ts.phi, symmetry_order)
            if math.sqrt((dxy / r_t) ** 2 + (da / r_a) ** 2) <= 1.0:
                members.append(i)
                assigned[i] = True
        clusters.append(members)
    best = max(range(len(clusters)),
               key=lambda c: (len(clusters[c]),
                              -min(particles[i].local_cost for i in clusters[c])))
    dom = clusters[best]
    rep = min(dom, key=lambda i: (particles[i].local_cost, i))
    theta_star = particles[rep].theta
    dev = np.array([[particles[i].theta.x - theta_star.x,
                     particles[i].theta.y - theta_star.y,
                     wrap_symmetric(particles[i].theta.phi - theta_star.phi,
                                    symmetry_order)] for i in dom])
    if len(dom) < 2:
        sigma = 1e-8 * np.eye(3)
    else:
        dev = dev - dev.mean(axis=0)
        sigma = dev.T @ dev / (len(dom) - 1)
        if np.trace(sigma) < 1e-8:
            sigma = 1e-8 * np.eye(3)
    return theta_star, sigma, len(dom), clusters


def update_shape_weights(hyps: HypothesisSet, batch: Batch,
                         mm: MeasurementModel,
                         cfg: EstimatorConfig = EstimatorConfig()) -> HypothesisSet:
    """E-step: fold the batch likelihood at each theta* into the weights.

    Log-weight increment is -1/2 sum_m eps^T Sigma^-1 eps at the shape's
    representative pose; weights are renormalized in the log domain.  MAP
    ties break toward lower batch cost, then lower shape index.
    """
    logw = np.array([s.log_weight for s in hyps.shapes])
    for k, sp in enumerate(hyps.shapes):
        logw[k] += -math.inf if sp.failed else -0.5 * sp.batch_cost
    logw -= np.max(logw)
    logw = np.maximum(logw, cfg.weight_log_floor)
    w = np.exp(logw)
    w /= w.sum()
    shapes = []
    for k, sp in enumerate(hyps.shapes):
        shapes.append(replace_shape(sp, weight=float(w[k]),
                                    log_weight=float(math.log(max(w[k], 1e-300)))))
    map_idx = min(range(len(shapes)),
                  key=lambda k: (-shapes[k].weight, shapes[k].batch_cost, k))
    return HypothesisSet(shapes=shapes, map_index=map_idx)


def replace_shape(sp: ShapeParticle, **kw) -> ShapeParticle:
    out = ShapeParticle(shape_id=sp.shape_id, weight=sp.weight,
                        log_weight=sp.log_weight,
                        pose_particles=sp.pose_particles,
                        theta_star=sp.theta_star, Sigma_theta=sp.Sigma_theta,
                        batch_cost=sp.batch_cost, failed=sp.failed)
    for k, v in kw.items():
        setattr(out, k, v)
    return out


def run_batch(hyps: HypothesisSet, batch: Batch, shape_lib, tool: ToolPointCloud,
              cfg: EstimatorConfig = EstimatorConfig()) -> HypothesisSet:
    """One estimation cycle: refine pose particles, cluster, reweight.

    shape_lib maps shape_id -> CompositeShape.  Particles are refined
    independently (a parallel map in spirit); after clustering, each
    cluster keeps its best member so duplicated particles do not multiply
    the work of later batches.
    """
    mm = MeasurementModel.isotropic(cfg.sigma_scale * cfg.sigma_f,
                                    tool.char_length)
    new_shapes = []
    for sp in hyps.shapes:
        shape = shape_lib[sp.shape_id]
        if not sp.pose_particles:
            new_shapes.append(replace_shape(sp, failed=True,
                                            batch_cost=math.inf))
            continue
        thetas = np.array([p.theta.as_array() for p in sp.pose_particles])
        lams = np.clip([p.lm_lambda for p in sp.pose_particles],
                       cfg.lm_lambda_min, 1.0)
        thetas, costs, lams, acc = lm_refine(batch, thetas, np.asarray(lams),
                                             shape, tool, mm, cfg)
        parts = [PoseParticle(theta=Pose2.from_array(thetas[i]),
                              local_cost=float(costs[i]),
                              converged=bool(acc[i]),
                              lm_lambda=float(lams[i]))
                 for i in range(len(thetas))]
        theta_star, sigma, count, clusters = cluster_poses(
            parts, (cfg.cluster_r_t, cfg.cluster_r_a), shape.symmetry_order)
        if cfg.prune_to_clusters:
            keep = [min(c, key=lambda i: (parts[i].local_cost, i))
                    for c in clusters]
            parts = [parts[i] for i in sorted(keep)]
        best_cost = min(p.local_cost for p in parts)
        new_shapes.append(replace_shape(
            sp, pose_particles=parts, theta_star=theta_star,
            Sigma_theta=sigma, batch_cost=best_cost, failed=False))
    out = HypothesisSet(shapes=new_shapes, map_index=hyps.map_index)
    return update_shape_weights(out, batch, mm, cfg)


def init_hypotheses(first_wrench: Wrench2, tool_pose: Pose2, shape_lib,
                    tool: ToolPointCloud, params: PotentialParams,
                    cfg: EstimatorConfig = EstimatorConfig()) -> HypothesisSet:
    """Build the initial hypothesis set from the first-contact wrench."""
    line = wrench_axis_init(first_wrench, cfg.f_contact_threshold)
    shapes = []
    ids = sorted(shape_lib.keys()) if isinstance(shape_lib, dict) \
        else range(len(shape_lib))
    ids = list(ids)
    for sid in ids:
        parts = []
        for depth in (3.0, 12.0):        # widen the overlap rejection once
            try:
                thetas = sample_pose_hypotheses(
                    line, tool_pose, shape_lib[sid], tool,
                    cfg.n_pose_particles, params, reject_depth=depth)
                parts = [PoseParticle(theta=t, lm_lambda=cfg.lm_lambda0)
                         for t in thetas]
                break
            except NoFeasibleHypothesis:
                continue
        shapes.append(ShapeParticle(shape_id=sid, weight=0.0, log_weight=0.0,
                                    pose_particles=parts, failed=not parts))
    live = [s for s in shapes if not s.failed]
    if not live:
        raise NoFeasibleHypothesis("no shape admits a first-contact pose")
    w0 = 1.0 / len(live)
    for s in shapes:
        s.weight = 0.0 if s.failed else w0
        s.log_weight = math.log(max(s.weight, 1e-300))
        if s.pose_particles:
            sym = shape_lib[s.shape_id].symmetry_order
            s.theta_star, s.Sigma_theta, _, _ = cluster_poses(
                s.pose_particles, (cfg.cluster_r_t, cfg.cluster_r_a), sym)
    map_idx = min(range(len(shapes)), key=lambda k: (-shapes[k].weight, k))
    return HypothesisSet(shapes=shapes, map_index=map_idx)
