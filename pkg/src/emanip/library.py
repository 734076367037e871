"""Default screw-head shapes and spanner tools.

Shape labels follow a Shape-Size convention where the suffix is the
characteristic size in millimeters: for hexagons and squares the width
across flats, for rectangles the short (grippable) width, for the flower
the width across opposite lobes.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import CompositeShape, Superquadric2, ToolPointCloud, sample_polyline

MM = 1e-3

# Slab exponent for near-flat faces; upsilon=1/7 gives exponent 14, placing
# the soft-contact band well inside the jaw clearance while keeping the
# barrier log-slope resolvable by 1e-6 finite-difference steps.
_FLAT_UPSILON = 1.0 / 7.0


def _strip(half_width: float, half_length: float, angle: float):
    """A slab constraining |local y| <= half_width, long axis along local x."""
    return (Superquadric2(a1=half_length, a2=half_width, upsilon=_FLAT_UPSILON), angle)


def hex_shape(across_flats_mm: float, sharpness: float = 50.0) -> CompositeShape:
    """Regular hexagon as the smooth intersection of three strips."""
    w = 0.5 * across_flats_mm * MM
    circum = w / math.cos(math.pi / 6.0)
    slabs = tuple(_strip(w, 2.0 * circum, k * math.pi / 3.0) for k in range(3))
    return CompositeShape(label=f"Hex-{across_flats_mm:g}", slabs=slabs,
                          sharpness=sharpness, symmetry_order=6)


def square_shape(across_flats_mm: float, sharpness: float = 50.0) -> CompositeShape:
    w = 0.5 * across_flats_mm * MM
    slabs = (_strip(w, 2.5 * w, 0.0), _strip(w, 2.5 * w, math.pi / 2.0))
    return CompositeShape(label=f"Squ-{across_flats_mm:g}", slabs=slabs,
                          sharpness=sharpness, symmetry_order=4)


def rect_shape(width_mm: float, length_mm: float, sharpness: float = 50.0) -> CompositeShape:
    """Rectangle with grippable width `width_mm` and long dimension `length_mm`."""
    hw, hl = 0.5 * width_mm * MM, 0.5 * length_mm * MM
    slabs = (_strip(hw, 1.4 * hl, 0.0), _strip(hl, 1.4 * hw, math.pi / 2.0))
    return CompositeShape(label=f"Rec-{width_mm:g}", slabs=slabs,
                          sharpness=sharpness, symmetry_order=2)


def flower_shape(across_lobes_mm: float, sharpness: float = 50.0) -> CompositeShape:
    """Six-lobed outline as the smooth union of three elongated ellipses."""
    a1 = 0.5 * across_lobes_mm * MM
    a2 = 0.38 * a1
    slabs = tuple((Superquadric2(a1=a1, a2=a2, upsilon=1.0 / 3.0), k * math.pi / 3.0)
                  for k in range(3))
    return CompositeShape(label=f"Flw-{across_lobes_mm:g}", slabs=slabs,
                          sharpness=sharpness, combine="union", symmetry_order=6)


def default_shapes() -> dict:
    shapes = [
        hex_shape(36), hex_shape(34), hex_shape(30),
        square_shape(19), rect_shape(20, 28), rect_shape(30, 40),
        flower_shape(33),
    ]
    return {s.label: s for s in shapes}


def spanner_tool(size_mm: float, clearance_mm: float = 2.0,
                 spacing_mm: float = 2.0) -> ToolPointCloud:
    """Open-ended spanner jaw profile sampled as a point cloud.

    The tool frame origin sits at the engaged screw center; the mouth opens
    toward +x so the tool advances along its own +x axis to engage.  The
    profile is the contact-relevant inner boundary: chamfered mouth, two
    parallel jaw faces, and a V-shaped throat relieved enough to clear the
    screw's far corner.
    """
    s = size_mm * MM
    half_gap = 0.5 * (s + clearance_mm * MM)
    face_front = 0.47 * s           # jaw face extent toward the mouth
    face_back = -0.33 * s           # jaw face extent toward the throat
    throat_apex = -0.80 * s         # beyond the hex circumradius 0.577*s
    chamfer = 0.15 * s
    cham_ang = math.radians(45.0)

    upper = [
        (face_front + chamfer * math.cos(cham_ang), half_gap + chamfer * math.sin(cham_ang)),
        (face_front, half_gap),
        (face_back, half_gap),
        (throat_apex, 0.0),
    ]
    upper = np.array(upper)
    lower = upper[::-1] * np.array([1.0, -1.0])
    pts_u = sample_polyline(upper, spacing_mm * MM)
    pts_l = sample_polyline(lower, spacing_mm * MM)[1:]  # skip shared apex
    pts = np.vstack([pts_u, pts_l])
    return ToolPointCloud(label=f"spanner-{size_mm:g}", points=pts,
                          aperture=2.0 * half_gap)


def default_tools() -> dict:
    tools = [spanner_tool(36), spanner_tool(34), spanner_tool(30), spanner_tool(21)]
    return {t.label: t for t in tools}
