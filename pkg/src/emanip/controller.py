"""Variance-informed stiffness modulation and task-frame stiffness mapping.

The stiffness anisotropy ratio rises as the pose estimate sharpens,
stiffening the insertion axis; the diagonal task-frame matrix is mapped
into the control frame through the SE(2) adjoint congruence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2, se2_adjoint


@dataclass(frozen=True)
class StiffnessConfig:
    kappa_min: float = 1.0
    kappa_max: float = 20.0
    sigma0: float = 2.5e-5
    k_t: float = 800.0              # tangential translational stiffness
    k_phi: float = 40.0             # rotational stiffness

    def __post_init__(self):
        if not (0 < self.kappa_min < self.kappa_max):
            raise ValueError("need 0 < kappa_min < kappa_max")
        if self.sigma0 <= 0 or self.k_t <= 0 or self.k_phi <= 0:
            raise ValueError("scales must be positive")


def stiffness_ratio(sigma_theta: np.ndarray, cfg: StiffnessConfig) -> float:
    """Anisotropy ratio kappa from the pose-covariance trace.

    kappa = kappa_min + (1 - tanh(Tr/sigma0))/2 * (kappa_max - kappa_min):
    high uncertainty gives the compliant kappa_min limit; the ratio tops
    out at the midpoint as the trace vanishes (tanh(0) = 0).
    """
    tr = float(np.trace(np.asarray(sigma_theta, dtype=float)))
    gain = (1.0 - math.tanh(tr / cfg.sigma0)) / 2.0
    return cfg.kappa_min + gain * (cfg.kappa_max - cfg.kappa_min)


def rcc_stiffness(kappa: float, z: Pose2, cfg: StiffnessConfig) -> np.ndarray:
    """Control-frame stiffness K_C = Ad^-T diag(k_n, k_t, k_phi) Ad^-1.

    k_n = kappa * k_phi per the anisotropy-ratio definition; the normal
    axis is the tool's insertion axis (local +x).
    """
    k_rcc = np.diag([kappa * cfg.k_phi, cfg.k_t, cfg.k_phi])
    ad_inv = se2_adjoint(z.transform().inverse())
    return ad_inv.T @ k_rcc @ ad_inv
