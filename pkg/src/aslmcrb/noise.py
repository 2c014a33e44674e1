"""Gaussian and Rician noise generation plus background sigma estimation.

Noise draws come from counter-based streams keyed by
(seed, voxel, repetition, bootstrap), so a given measurement is
reproducible in isolation and independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import InsufficientSamples

GAUSSIAN = "gaussian"
RICIAN = "rician"
NOISE_KINDS = (GAUSSIAN, RICIAN)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    kind: str = GAUSSIAN
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma}")
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        rng.check_seed(self.seed)


def add_noise(clean: np.ndarray, spec: NoiseSpec,
              stream_id: tuple[int, int, int]) -> np.ndarray:
    """One noisy realization of a clean curve.

    stream_id = (voxel index, repetition index, bootstrap index or 0).
    Gaussian: x = clean + n. Rician: x = sqrt((clean + n1)^2 + n2^2) with
    two independent channels of the same per-channel sigma.
    """
    voxel, rep, boot = (int(i) for i in stream_id)
    clean = np.asarray(clean, dtype=float)
    g = rng.stream(spec.seed, rng.DOMAIN_NOISE, c1=boot, c2=rep, c3=voxel)
    n = clean.size
    if spec.kind == GAUSSIAN:
        return clean + spec.sigma * g.standard_normal(n).reshape(clean.shape)
    draws = spec.sigma * g.standard_normal(2 * n)
    n1 = draws[:n].reshape(clean.shape)
    n2 = draws[n:].reshape(clean.shape)
    return np.sqrt((clean + n1) ** 2 + n2 ** 2)


def estimate_sigma_background(background_samples) -> float:
    """Rayleigh-based sigma estimate from zero-signal magnitude samples.

    sigma_hat = sqrt(mean(x^2) / 2); needs at least 100 samples, all >= 0.
    """
    x = np.asarray(background_samples, dtype=float)
    if x.size < 100:
        raise InsufficientSamples(
            f"need >= 100 background samples, got {x.size}")
    if np.any(x < 0.0) or not np.all(np.isfinite(x)):
        raise ValueError("background samples must be finite and >= 0")
    return float(np.sqrt(np.mean(x ** 2) / 2.0))
