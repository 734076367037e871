"""Planar rigid-body geometry: SE(2) transforms, superellipse shapes, tool point clouds.

Conventions: angles in radians wrapped to (-pi, pi], lengths in meters.
Shape evaluation is batched over leading axes wherever it matters for speed;
scalar entry points wrap the batched kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# +90 degree rotation generator: dR/dphi = ROT90 @ R(phi)
ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])

# Axis smoothing floor for non-integer superellipse exponents below 2,
# where |x|^e is not twice differentiable at the axis.
_AXIS_EPS2 = 1e-12


def wrap_angle(phi):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    w = np.mod(np.asarray(phi) + math.pi, TWO_PI) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(phi) == 0 else w


def rot2(phi: float) -> np.ndarray:
    """2x2 rotation matrix."""
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def rot2_batch(phi: np.ndarray) -> np.ndarray:
    """Stack of 2x2 rotation matrices for angles of shape (B,). Returns (B, 2, 2)."""
    c, s = np.cos(phi), np.sin(phi)
    out = np.empty(phi.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y, phi). phi is wrapped to (-pi, pi] on construction."""

    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])

    @staticmethod
    def from_array(a) -> "Pose2":
        a = np.asarray(a, dtype=float)
        return Pose2(float(a[0]), float(a[1]), float(a[2]))

    def transform(self) -> "Transform2":
        return Transform2(rot2(self.phi), np.array([self.x, self.y]))


@dataclass(frozen=True)
class Transform2:
    """Rigid transform with orthonormal rotation (det +1) and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(2))

    @staticmethod
    def identity() -> "Transform2":
        return Transform2(np.eye(2), np.zeros(2))

    @staticmethod
    def from_pose(pose: Pose2) -> "Transform2":
        return pose.transform()

    def to_pose(self) -> Pose2:
        phi = math.atan2(self.rotation[1, 0], self.rotation[0, 0])
        return Pose2(float(self.translation[0]), float(self.translation[1]), phi)

    def compose(self, other: "Transform2") -> "Transform2":
        return Transform2(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Transform2":
        rt = self.rotation.T
        return Transform2(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-10) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(2), atol=tol)
                and abs(np.linalg.det(r) - 1.0) < tol)


def se2_apply(t: Transform2, p) -> np.ndarray:
    """Apply a rigid transform to a point (or (..., 2) array of points)."""
    p = np.asarray(p, dtype=float)
    return p @ t.rotation.T + t.translation


def se2_adjoint(t: Transform2) -> np.ndarray:
    """SE(2) adjoint acting on planar twists (vx, vy, omega).

    Block form [[R, S t], [0, 1]] with S = [[0, 1], [-1, 0]].
    """
    ad = np.eye(3)
    ad[:2, :2] = t.rotation
    ad[0, 2] = t.translation[1]
    ad[1, 2] = -t.translation[0]
    return ad


# ---------------------------------------------------------------------------
# Superellipse shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Superquadric2:
    """2D superellipse defined by the inside-outside function

        F(x, y) = (|x|/a1)^(2/upsilon) + (|y|/a2)^(2/upsilon) - 1

    negative inside, zero on the boundary, positive outside.
    """

    a1: float
    a2: float
    upsilon: float

    def __post_init__(self):
        if not (self.a1 > 0 and self.a2 > 0 and self.upsilon > 0):
            raise ValueError("superellipse parameters must be positive")

    @property
    def exponent(self) -> float:
        return 2.0 / self.upsilon


def _int_pow(t: np.ndarray, k: int) -> np.ndarray:
    """t**k for small non-negative integer k by repeated squaring.

    Much faster than libm pow on large arrays; the slab exponents in the
    shape library are small even integers.
    """
    if k == 0:
        return np.ones_like(t)
    result = None
    base = t
    while k:
        if k & 1:
            result = base if result is None else result * base
        k >>= 1
        if k:
            base = base * base
    return result


def _axis_power(x: np.ndarray, a: float, e: float):
    """(|x|/a)^e with value, first and second derivative in x.

    For e >= 2 the absolute value is handled analytically (the function is
    C^2 there); below 2 a smoothing floor |x| -> sqrt(x^2 + eps) keeps the
    derivatives defined on the axis.
    """
    if e >= 2.0:
        t = np.abs(x) / a
        if e == int(e):
            t_em2 = _int_pow(t, int(e) - 2)
        else:
            t_em2 = t ** (e - 2.0)
        t_em1 = t_em2 * t
        val = t_em1 * t
        d1 = (e / a) * np.sign(x) * t_em1
        d2 = (e * (e - 1.0) / a**2) * t_em2
    else:
        xs = np.sqrt(x * x + _AXIS_EPS2)
        val = (xs / a) ** e
        d1 = (e / a**e) * xs ** (e - 2.0) * x
        d2 = (e / a**e) * xs ** (e - 4.0) * (xs * xs + (e - 2.0) * x * x)
    return val, d1, d2


def sq_eval(sq: Superquadric2, pts: np.ndarray):
    """Inside-outside value, gradient and Hessian of a superellipse.

    pts has shape (..., 2); returns F (...,), grad (..., 2), hess (..., 2, 2).
    The Hessian is diagonal because the function is separable.
    """
    pts = np.asarray(pts, dtype=float)
    fx, gx, hx = _axis_power(pts[..., 0], sq.a1, sq.exponent)
    fy, gy, hy = _axis_power(pts[..., 1], sq.a2, sq.exponent)
    f = fx + fy - 1.0
    grad = np.stack([gx, gy], axis=-1)
    hess = np.zeros(pts.shape + (2,))
    hess[..., 0, 0] = hx
    hess[..., 1, 1] = hy
    return f, grad, hess


def sq_inside_outside(sq: Superquadric2, p) -> float:
    """Inside-outside function value at a single point."""
    f, _, _ = sq_eval(sq, np.asarray(p, dtype=float))
    return float(f)


@dataclass(frozen=True)
class CompositeShape:
    """Smooth boolean combination of rotated superellipse slabs.

    Each slab is evaluated in its own frame rotated by `angle` about the
    shape origin.  `combine="intersection"` blends with a smooth max
    (log-sum-exp with sharpness k), `combine="union"` with a smooth min.
    `symmetry_order` is the rotational symmetry of the resulting outline
    (1 = none), used by estimation and planning to quotient equivalent poses.
    """

    label: str
    slabs: tuple  # of (Superquadric2, angle) pairs
    sharpness: float = 50.0
    combine: str = "intersection"
    symmetry_order: int = 1

    def __post_init__(self):
        if len(self.slabs) == 0:
            raise ValueError("composite shape needs at least one slab")
        if self.combine not in ("intersection", "union"):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        object.__setattr__(self, "slabs", tuple((sq, float(a)) for sq, a in self.slabs))
        # Precomputed slab-stacked arrays for the vectorized evaluator.
        angles = np.array([a for _, a in self.slabs])
        object.__setattr__(self, "_rot", rot2_batch(angles))          # (m, 2, 2)
        object.__setattr__(self, "_a", np.array([[sq.a1, sq.a2] for sq, _ in self.slabs]))
        object.__setattr__(self, "_e", np.array([sq.exponent for sq, _ in self.slabs]))

    @property
    def symmetry_angle(self) -> float:
        return TWO_PI / self.symmetry_order

    def engagement_half_widths(self) -> list:
        """Per slab: (grip half-width, jaw-normal angle in the shape frame).

        For an intersection slab the tool grips across the slab's short
        extent a2 with jaw normal along the slab's local y; for a union slab
        it grips across the lobe's long extent a1 with jaw normal along the
        slab's local x.
        """
        out = []
        for sq, alpha in self.slabs:
            if self.combine == "intersection":
                out.append((sq.a2, alpha + math.pi / 2.0))
            else:
                out.append((sq.a1, alpha))
        return out


def composite_eval(shape: CompositeShape, pts: np.ndarray):
    """Value, gradient and Hessian of the composite inside-outside function.

    pts (..., 2) -> F (...,), grad (..., 2), hess (..., 2, 2).
    """
    pts = np.asarray(pts, dtype=float)
    sign = 1.0 if shape.combine == "intersection" else -1.0
    k = shape.sharpness

    f_all, g_all, h_all = [], [], []
    for (sq, _), rot in zip(shape.slabs, shape._rot):
        local = pts @ rot                                # R(-alpha) p
        fx, gx, hx = _axis_power(local[..., 0], sq.a1, sq.exponent)
        fy, gy, hy = _axis_power(local[..., 1], sq.a2, sq.exponent)
        f_all.append(sign * (fx + fy - 1.0))
        d1 = np.stack([gx, gy], axis=-1)
        g_all.append(sign * (d1 @ rot.T))                # back to shape frame
        # rot @ diag(hx, hy) @ rot.T, expanded columnwise
        c0 = rot[:, 0]
        c1 = rot[:, 1]
        h_all.append(hx[..., None, None] * (c0[:, None] * c0[None, :])
                     + hy[..., None, None] * (c1[:, None] * c1[None, :]))
    f_all = np.stack(f_all, axis=0)                      # (m, ...)
    g_all = np.stack(g_all, axis=0)                      # (m, ..., 2)
    h_all = np.stack(h_all, axis=0)                      # (m, ..., 2, 2)

    fmax = f_all.max(axis=0)
    # Clamp the softmax exponent to keep far-field slabs out of the
    # subnormal range (they contribute nothing anyway).
    w = np.exp(np.maximum(k * (f_all - fmax), -700.0))
    wsum = w.sum(axis=0)
    f = fmax + np.log(wsum) / k
    w = w / wsum                                         # softmax over slabs
    grad = (w[..., None] * g_all).sum(axis=0)
    hess = sign * (w[..., None, None] * h_all).sum(axis=0)
    hess += k * ((w[..., None, None]
                  * (g_all[..., :, None] * g_all[..., None, :])).sum(axis=0)
                 - grad[..., :, None] * grad[..., None, :])
    return sign * f, sign * grad, sign * hess


def composite_inside_outside(shape: CompositeShape, p) -> float:
    """Composite inside-outside value at a single point."""
    f, _, _ = composite_eval(shape, np.asarray(p, dtype=float))
    return float(f)


def shape_circumradius(shape: CompositeShape) -> float:
    """Largest boundary radius, from dense ray casting."""
    pts, _ = boundary_points(shape, 720)
    return float(np.max(np.linalg.norm(pts, axis=1)))


def boundary_points(shape: CompositeShape, n: int):
    """Sample the F = 0 locus along n rays from the origin.

    Returns (points (n, 2), outward unit normals (n, 2)).  Shapes are assumed
    star-shaped about their origin, which holds for the screw library.
    """
    ang = np.linspace(0.0, TWO_PI, n, endpoint=False)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)

    # Bracket the zero crossing, then bisect.
    r_hi = np.full(n, _outer_radius(shape))
    r_lo = np.zeros(n)
    f_lo, _, _ = composite_eval(shape, np.zeros((n, 2)))
    if np.any(f_lo >= 0):
        raise ValueError("shape origin must be strictly inside the boundary")
    for _ in range(60):
        r_mid = 0.5 * (r_lo + r_hi)
        f_mid, _, _ = composite_eval(shape, dirs * r_mid[:, None])
        inside = f_mid < 0
        r_lo = np.where(inside, r_mid, r_lo)
        r_hi = np.where(inside, r_hi, r_mid)
    pts = dirs * (0.5 * (r_lo + r_hi))[:, None]
    _, grad, _ = composite_eval(shape, pts)
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return pts, normals


def _outer_radius(shape: CompositeShape) -> float:
    r = max(max(sq.a1, sq.a2) for sq, _ in shape.slabs)
    return 2.0 * r


# ---------------------------------------------------------------------------
# Tool point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToolPointCloud:
    """Rigid tool sampled as points fixed in the tool frame.

    `aperture` is the jaw opening (grip width) and doubles as the
    characteristic length for mixed force/torque norms.
    """

    label: str
    points: np.ndarray
    aperture: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("tool point cloud is empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.aperture <= 0.0:
            object.__setattr__(self, "aperture",
                               float(pts[:, 1].max() - pts[:, 1].min()))

    @property
    def char_length(self) -> float:
        return self.aperture

    def world_points(self, pose: Pose2) -> np.ndarray:
        return se2_apply(pose.transform(), self.points)


def sample_polyline(vertices, spacing: float) -> np.ndarray:
    """Sample points along a polyline at (approximately) uniform spacing."""
    vertices = np.asarray(vertices, dtype=float)
    out = [vertices[0]]
    for a, b in zip(vertices[:-1], vertices[1:]):
        seg = b - a
        length = float(np.linalg.norm(seg))
        n = max(1, int(math.ceil(length / spacing)))
        for i in range(1, n + 1):
            out.append(a + seg * (i / n))
    return np.array(out)


# ---------------------------------------------------------------------------
# JSON (de)serialization of the shape / tool libraries
# ---------------------------------------------------------------------------

def shape_to_dict(shape: CompositeShape) -> dict:
    return {
        "label": shape.label,
        "slabs": [{"a1": sq.a1, "a2": sq.a2, "upsilon": sq.upsilon, "angle": a}
                  for sq, a in shape.slabs],
        "sharpness": shape.sharpness,
        "combine": shape.combine,
        "symmetry": shape.symmetry_order,
    }


def shape_from_dict(d: dict) -> CompositeShape:
    slabs = tuple((Superquadric2(s["a1"], s["a2"], s["upsilon"]), float(s["angle"]))
                  for s in d["slabs"])
    return CompositeShape(label=d["label"], slabs=slabs,
                          sharpness=float(d.get("sharpness", 50.0)),
                          combine=d.get("combine", "intersection"),
                          symmetry_order=int(d.get("symmetry", 1)))


def tool_to_dict(tool: ToolPointCloud) -> dict:
    return {"label": tool.label,
            "points": np.asarray(tool.points).tolist(),
            "aperture": tool.aperture}


def tool_from_dict(d: dict) -> ToolPointCloud:
    return ToolPointCloud(label=d["label"], points=np.array(d["points"]),
                          aperture=float(d.get("aperture", 0.0)))
