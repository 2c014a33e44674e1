"""Synthetic voxel datasets with well-specified and misspecified generators.

Truth parameters are drawn from per-voxel counter-based streams, so a
phantom is fully determined by (spec, protocol) regardless of evaluation
order. The misspecified generators mimic physiological mechanisms that the
fitted model does not represent: a wrong fixed tissue T1, venous/efferent
outflow accelerating the residue decay, and a two-compartment partial
volume mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .dataset import VoxelDataset, manifest_for
from .kinetic import Protocol, batch_curves
from .noise import NoiseSpec, add_noise

GEN_BUXTON = "buxton"
GEN_WRONG_T1 = "buxton_wrong_t1"
GEN_OUTFLOW = "buxton_outflow"
GEN_PARTIAL_VOLUME = "buxton_partial_volume"
GENERATORS = (GEN_BUXTON, GEN_WRONG_T1, GEN_OUTFLOW, GEN_PARTIAL_VOLUME)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic dataset.

    generator_params by generator:
      buxton_wrong_t1: either t1_true (one true T1 for every voxel) or
        t1_global + t1_alt + top_fraction (voxels in the top fraction of
        clean mean signal get t1_alt);
      buxton_outflow: k_out (1/s extra clearance rate);
      buxton_partial_volume: mix_w plus the second compartment f_b, att_b.
    """

    n_voxels: int
    f_range: tuple[float, float]
    att_range: tuple[float, float]
    generator: str = GEN_BUXTON
    generator_params: dict = field(default_factory=dict)
    m_total: int = 2
    noise: NoiseSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_voxels < 1:
            raise ValueError("n_voxels must be >= 1")
        if self.m_total < 2:
            raise ValueError("m_total must be >= 2")
        if not (0.0 <= self.f_range[0] < self.f_range[1]):
            raise ValueError(f"bad f_range {self.f_range}")
        if not (0.0 <= self.att_range[0] < self.att_range[1]):
            raise ValueError(f"bad att_range {self.att_range}")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        rng.check_seed(self.seed)


def draw_truths(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel uniform (f, att) draws from dedicated truth streams."""
    f = np.empty(spec.n_voxels)
    att = np.empty(spec.n_voxels)
    f_lo, f_hi = spec.f_range
    a_lo, a_hi = spec.att_range
    for i in range(spec.n_voxels):
        g = rng.stream(spec.seed, rng.DOMAIN_TRUTH, c3=i)
        u = g.random(2)
        f[i] = f_lo + u[0] * (f_hi - f_lo)
        att[i] = a_lo + u[1] * (a_hi - a_lo)
    return f, att


def clean_curves(spec: PhantomSpec, protocol: Protocol, f: np.ndarray,
                 att: np.ndarray):
    """Noise-free curves for the chosen generator.

    Returns (curves, t1_true) where t1_true is a per-voxel array for the
    wrong-T1 generator and None otherwise.
    """
    params = spec.generator_params
    if spec.generator == GEN_BUXTON:
        return batch_curves(f, att, protocol), None
    if spec.generator == GEN_OUTFLOW:
        k_out = float(params.get("k_out", 0.0))
        return batch_curves(f, att, protocol, k_extra=k_out), None
    if spec.generator == GEN_PARTIAL_VOLUME:
        w = float(params.get("mix_w", 0.7))
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"mix_w must be in [0, 1], got {w}")
        f_b = float(params.get("f_b", 0.0))
        att_b = float(params.get("att_b", 0.0))
        main = batch_curves(f, att, protocol)
        other = batch_curves(np.full_like(f, f_b), np.full_like(att, att_b),
                             protocol)
        return w * main + (1.0 - w) * other, None
    # wrong fixed T1
    if "t1_true" in params:
        t1_true = np.full(spec.n_voxels, float(params["t1_true"]))
    else:
        t1_global = float(params.get("t1_global", protocol.t1_tissue))
        t1_alt = float(params["t1_alt"])
        top_fraction = float(params.get("top_fraction", 0.10))
        if not 0.0 < top_fraction < 1.0:
            raise ValueError(f"top_fraction must be in (0, 1), got {top_fraction}")
        base = batch_curves(f, att, protocol, t1=np.full(spec.n_voxels,
                                                         t1_global))
        intensity = base.mean(axis=1)
        n_top = math.ceil(top_fraction * spec.n_voxels)
        order = np.argsort(-intensity, kind="stable")
        t1_true = np.full(spec.n_voxels, t1_global)
        t1_true[order[:n_top]] = t1_alt
    return batch_curves(f, att, protocol, t1=t1_true), t1_true


def sigma_for_snr(clean: np.ndarray, snr: float) -> float:
    """Peak-signal noise level: sigma = max |clean| / snr."""
    if snr <= 0.0:
        raise ValueError("snr must be > 0")
    peak = float(np.max(np.abs(clean)))
    if peak == 0.0:
        raise ValueError("clean curves are identically zero")
    return peak / snr


def generate_phantom(spec: PhantomSpec, protocol: Protocol) -> VoxelDataset:
    """Full synthetic dataset with truth maps attached.

    Each repetition of each voxel comes from its own noise stream
    (voxel, repetition, 0); spec.noise None means exact clean copies.
    """
    f, att = draw_truths(spec)
    curves, t1_true = clean_curves(spec, protocol, f, att)
    v, n, m = spec.n_voxels, protocol.n_plds, spec.m_total
    if spec.noise is None:
        # float64 replicates keep the noiseless exactness properties intact
        data = np.repeat(curves[:, :, None], m, axis=2)
    else:
        data = np.empty((v, n, m), dtype=np.float32)
        for i in range(v):
            for r in range(m):
                data[i, :, r] = add_noise(curves[i], spec.noise, (i, r, 0))
    manifest = manifest_for(protocol, dims=(v, n, m), seed=spec.seed,
                            generator=spec.generator,
                            has_t1_map=t1_true is not None)
    return VoxelDataset(
        data=data,
        mask=np.ones(v, dtype=bool),
        manifest=manifest,
        truth_f=f,
        truth_att=att,
        t1_map=t1_true,
    )
