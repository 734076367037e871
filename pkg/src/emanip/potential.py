"""Manipulation potential W(z, u; theta) and its analytic derivative blocks.

W couples an impedance spring between the command u and the tool state z
with a smooth one-sided contact barrier summed over tool points evaluated
against the object's inside-outside function.  All first- and second-order
blocks needed by the equilibrium dynamics, the haptic metric, and pose
estimation are computed by a hand-coded chain rule; evaluation is batched
over a leading axis so estimation and planning can process many
configurations per call.

Derivative conventions follow d2_ab = d/da (d/db W)^T; with the spring the
only u-dependent term, hess_uu = Kc, hess_uz = -Kc and hess_utheta = 0 hold
structurally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import SingularHessian
from .geometry import (CompositeShape, Pose2, ToolPointCloud, composite_eval,
                       rot2_batch)

# Far-field cutoff in units of zeta1.  exp(-40) ~ 4e-18 puts the truncated
# tail below float64 resolution of both the unit offset and the force scale.
BAND_CUTOFF = 40.0


@dataclass(frozen=True)
class PotentialParams:
    """Contact smoothing/stiffness and impedance stiffness matrix."""

    zeta1: float
    zeta2: float
    Kc: np.ndarray

    def __post_init__(self):
        kc = np.asarray(self.Kc, dtype=float).reshape(3, 3)
        kc.setflags(write=False)
        object.__setattr__(self, "Kc", kc)
        if not (self.zeta1 > 0 and self.zeta2 > 0):
            raise ValueError("zeta1 and zeta2 must be positive")
        if not np.allclose(kc, kc.T, atol=1e-9):
            raise ValueError("Kc must be symmetric")
        if np.linalg.eigvalsh(kc).min() <= 0:
            raise ValueError("Kc must be positive definite")

    def with_stiffness(self, kc: np.ndarray) -> "PotentialParams":
        return PotentialParams(self.zeta1, self.zeta2, kc)


@dataclass
class PotentialEval:
    """Value and derivative blocks of W at one configuration."""

    W: float
    grad_z: np.ndarray
    grad_u: np.ndarray
    grad_theta: np.ndarray
    hess_zz: np.ndarray
    hess_uu: np.ndarray
    hess_uz: np.ndarray
    hess_ztheta: np.ndarray
    hess_utheta: np.ndarray


class PotentialBatch:
    """Stacked evaluation over B configurations (see eval_potential)."""

    __slots__ = ("W", "grad_z", "grad_u", "grad_theta", "hess_zz",
                 "hess_ztheta", "Kc", "point_h1", "point_grad_w", "point_r")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))

    @property
    def hess_uu(self):
        return self.Kc

    @property
    def hess_uz(self):
        return -self.Kc

    def single(self) -> PotentialEval:
        """View batch element 0 as a PotentialEval."""
        return PotentialEval(
            W=float(self.W[0]),
            grad_z=self.grad_z[0],
            grad_u=self.grad_u[0],
            grad_theta=None if self.grad_theta is None else self.grad_theta[0],
            hess_zz=self.hess_zz[0],
            hess_uu=self.Kc.copy(),
            hess_uz=-self.Kc,
            hess_ztheta=None if self.hess_ztheta is None else self.hess_ztheta[0],
            hess_utheta=np.zeros((3, 3)),
        )


def contact_h(F: np.ndarray, zeta1: float, zeta2: float):
    """Barrier value h(F) = (1 + exp(-F/zeta1))^(zeta1*zeta2) with h', h''.

    Evaluated in the log domain so deep penetration (F -> -1) stays finite.
    """
    x = np.asarray(F, dtype=float) / zeta1
    softplus = np.where(x > 0, np.log1p(np.exp(-np.abs(x))),
                        -x + np.log1p(np.exp(-np.abs(x))))
    h = np.exp(zeta1 * zeta2 * softplus)
    s = _sigmoid(-x)
    l1 = -zeta2 * s
    l2 = zeta2 * s * (1.0 - s) / zeta1
    return h, h * l1, h * (l1 * l1 + l2)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def contact_potential_point(F: float, params: PotentialParams) -> float:
    """Contact barrier for a single inside-outside value."""
    h, _, _ = contact_h(np.asarray(F, dtype=float), params.zeta1, params.zeta2)
    return float(h)


def eval_potential(z: np.ndarray, u: np.ndarray, theta: np.ndarray,
                   shape: CompositeShape, tool: ToolPointCloud,
                   params: PotentialParams, *, want_theta: bool = False,
                   want_points: bool = False,
                   value_only: bool = False) -> PotentialBatch:
    """Batched potential evaluation.

    z, u, theta: (B, 3) arrays of poses (a single (3,) pose is promoted).
    Returns a PotentialBatch whose arrays have leading dimension B.
    want_theta adds grad_theta and hess_ztheta; want_points adds the
    per-point quantities used by the friction model (local barrier slope
    h', world-frame inside-outside gradient, and world offsets from the
    tool origin).

    Dispatches to the numba kernels when available; the numpy
    implementation below is the reference.
    """
    if _kernels.HAVE_NUMBA:
        z = np.ascontiguousarray(np.atleast_2d(np.asarray(z, dtype=float)))
        u = np.ascontiguousarray(np.atleast_2d(np.asarray(u, dtype=float)))
        theta = np.ascontiguousarray(np.atleast_2d(np.asarray(theta, dtype=float)))
        sign = 1.0 if shape.combine == "intersection" else -1.0
        args = (z, u, theta, tool.points, shape._rot, shape._a, shape._e,
                shape.sharpness, sign, params.zeta1, params.zeta2, params.Kc,
                BAND_CUTOFF)
        if value_only:
            return PotentialBatch(W=_kernels.value_kernel(*args))
        (W, grad_z, grad_u, grad_th, hess_zz, hess_zth, p_h1, p_gw,
         p_r) = _kernels.potential_kernel(*args, want_theta, want_points)
        out = PotentialBatch(W=W, grad_z=grad_z, grad_u=grad_u,
                             hess_zz=hess_zz, Kc=params.Kc)
        if want_theta:
            out.grad_theta = grad_th
            out.hess_ztheta = hess_zth
        if want_points:
            out.point_h1 = p_h1
            out.point_grad_w = p_gw
            out.point_r = p_r
        return out
    return _eval_potential_numpy(z, u, theta, shape, tool, params,
                                 want_theta=want_theta,
                                 want_points=want_points,
                                 value_only=value_only)


def _eval_potential_numpy(z, u, theta, shape, tool, params, *,
                          want_theta=False, want_points=False,
                          value_only=False) -> PotentialBatch:
    """Pure-numpy reference implementation of eval_potential."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    B = z.shape[0]
    n = tool.points.shape[0]
    kc = params.Kc
    z1, z2 = params.zeta1, params.zeta2

    rz = rot2_batch(z[:, 2])                       # (B, 2, 2)
    rth = rot2_batch(theta[:, 2])
    r_off = tool.points @ rz.transpose(0, 2, 1)            # R_z c', (B, n, 2)
    w = r_off + z[:, None, :2]                             # world points
    d_off = w - theta[:, None, :2]                         # w - t_theta
    p = d_off @ rth                                        # R_theta^T (w - t)

    F, g_loc, H_loc = composite_eval(shape, p)
    in_band = F <= BAND_CUTOFF * z1

    h, h1, h2 = contact_h(F, z1, z2)
    h = np.where(in_band, h, 1.0)
    h1 = np.where(in_band, h1, 0.0)
    h2 = np.where(in_band, h2, 0.0)

    delta = u - z
    kdelta = delta @ kc.T
    W = 0.5 * (delta * kdelta).sum(axis=1) + h.sum(axis=1)

    if value_only:
        return PotentialBatch(W=W)

    grad_u = kdelta
    # World-frame gradient/Hessian of F at each point.
    g_w = g_loc @ rth.transpose(0, 2, 1)
    jr = np.stack([-r_off[..., 1], r_off[..., 0]], axis=-1)   # ROT90 @ r
    jd = np.stack([-d_off[..., 1], d_off[..., 0]], axis=-1)   # ROT90 @ d

    # DF_z = [g_w ; (J r) . g_w],  DF_theta = -[g_w ; (J d) . g_w]
    df_z = np.concatenate([g_w, (jr * g_w).sum(-1)[..., None]], axis=-1)
    grad_z = -grad_u + (h1[..., None] * df_z).sum(axis=1)

    # World-frame Hessian of F: H_w = R H_loc R^T, unique components only.
    c = np.cos(theta[:, 2])[:, None]
    s = np.sin(theta[:, 2])[:, None]
    P, Q, Rr = H_loc[..., 0, 0], H_loc[..., 0, 1], H_loc[..., 1, 1]
    a00, a01 = c * P - s * Q, c * Q - s * Rr
    a10, a11 = s * P + c * Q, s * Q + c * Rr
    hw00 = a00 * c - a01 * s
    hw01 = a00 * s + a01 * c
    hw11 = a10 * s + a11 * c

    # quad_zz = A_z^T H_w A_z with A_z = [I | J r], plus the phi_z curvature
    # of p; summed against h1 componentwise (symmetric 3x3).
    vr_x = hw00 * jr[..., 0] + hw01 * jr[..., 1]
    vr_y = hw01 * jr[..., 0] + hw11 * jr[..., 1]
    gr = (g_w * r_off).sum(-1)

    def _wsum(w, x):
        return (w * x).sum(axis=1)

    hz = np.empty((B, 3, 3))
    hz[:, 0, 0] = _wsum(h1, hw00)
    hz[:, 0, 1] = hz[:, 1, 0] = _wsum(h1, hw01)
    hz[:, 1, 1] = _wsum(h1, hw11)
    hz[:, 0, 2] = hz[:, 2, 0] = _wsum(h1, vr_x)
    hz[:, 1, 2] = hz[:, 2, 1] = _wsum(h1, vr_y)
    hz[:, 2, 2] = _wsum(h1, jr[..., 0] * vr_x + jr[..., 1] * vr_y - gr)
    hess_zz = kc + hz + np.matmul((h2[..., None] * df_z).transpose(0, 2, 1), df_z)

    out = PotentialBatch(W=W, grad_z=grad_z, grad_u=grad_u, hess_zz=hess_zz,
                         Kc=kc)

    if want_theta:
        df_th = -np.concatenate([g_w, (jd * g_w).sum(-1)[..., None]], axis=-1)
        out.grad_theta = (h1[..., None] * df_th).sum(axis=1)
        # quad_ztheta = -A_z^T H_w A_theta with A_theta = [I | J d], plus the
        # mixed-rotation curvature terms in the phi_theta column.
        vd_x = hw00 * jd[..., 0] + hw01 * jd[..., 1]
        vd_y = hw01 * jd[..., 0] + hw11 * jd[..., 1]
        ht = np.empty((B, 3, 3))
        ht[:, 0, 0] = -hz[:, 0, 0]
        ht[:, 0, 1] = ht[:, 1, 0] = -hz[:, 0, 1]
        ht[:, 1, 1] = -hz[:, 1, 1]
        ht[:, 2, 0] = -hz[:, 0, 2]
        ht[:, 2, 1] = -hz[:, 1, 2]
        ht[:, 0, 2] = _wsum(h1, -vd_x - g_w[..., 1])
        ht[:, 1, 2] = _wsum(h1, -vd_y + g_w[..., 0])
        ht[:, 2, 2] = _wsum(h1, -(jr[..., 0] * vd_x + jr[..., 1] * vd_y) + gr)
        out.hess_ztheta = ht + np.matmul(
            (h2[..., None] * df_z).transpose(0, 2, 1), df_th)

    if want_points:
        out.point_h1 = h1
        out.point_grad_w = g_w * in_band[..., None]
        out.point_r = r_off
    return out


def total_potential(z: Pose2, u: Pose2, theta: Pose2, shape: CompositeShape,
                    tool: ToolPointCloud, params: PotentialParams) -> PotentialEval:
    """Potential with all gradient and Hessian blocks at one configuration."""
    batch = eval_potential(z.as_array(), u.as_array(), theta.as_array(),
                           shape, tool, params, want_theta=True)
    return batch.single()


def haptic_metric(eval_at_eq: PotentialEval, lambda_obs: float = 0.0) -> np.ndarray:
    """Schur complement G = d2uu - d2uz (d2zz)^-1 d2zu at an equilibrium."""
    hzz = eval_at_eq.hess_zz
    if lambda_obs > 0 and not haptic_obstacle_check(eval_at_eq, lambda_obs):
        raise SingularHessian(f"det(hess_zz) = {np.linalg.det(hzz):.3e}")
    huz = eval_at_eq.hess_uz
    return eval_at_eq.hess_uu - huz @ np.linalg.solve(hzz, huz.T)


def haptic_metric_batch(hess_zz: np.ndarray, kc: np.ndarray) -> np.ndarray:
    """Batched Schur complement using the structural blocks hess_uu = Kc,
    hess_uz = -Kc."""
    sol = np.linalg.solve(hess_zz, np.broadcast_to(kc, hess_zz.shape))
    return kc - kc @ sol


def haptic_obstacle_check(eval_at: PotentialEval, lambda_obs: float) -> bool:
    """True iff the state Hessian clears the obstacle threshold."""
    return bool(np.linalg.det(eval_at.hess_zz) >= lambda_obs)


def haptic_distance(path: np.ndarray, metric_fn) -> float:
    """Length of a sampled control path under the haptic metric.

    path: (m, 3) samples of u(gamma) on a uniform gamma grid over [0, 1];
    metric_fn maps a pose array (3,) to the 3x3 metric there.  Integrates
    sqrt(du^T G du) with the trapezoid rule.
    """
    path = np.asarray(path, dtype=float)
    m = path.shape[0]
    if m < 2:
        return 0.0
    du = np.gradient(path, axis=0) * (m - 1)
    vals = np.empty(m)
    for i in range(m):
        g = metric_fn(path[i])
        vals[i] = math.sqrt(max(float(du[i] @ g @ du[i]), 0.0))
    return float(np.trapezoid(vals, dx=1.0 / (m - 1)))
