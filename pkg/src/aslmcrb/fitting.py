"""Per-voxel maximum-likelihood estimation of (f, att).

Under the assumed Gaussian measurement model with known sigma the MLE is
the least-squares fit. The solver is a 32x32 grid initialization followed
by projected Gauss-Newton with backtracking halving; every accepted step
strictly decreases the sum of squared residuals, so runs are deterministic.
All voxels of a map advance together through vectorized iterations, which
is what makes the bootstrap studies affordable.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import SingularNormalEquations
from .kinetic import (
    KINK_EPS,
    KineticParams,
    Protocol,
    batch_curves,
    batch_jacobian,
    sample_times,
)

THREADS_ENV = "ASLMCRB_THREADS"

# fit-flag bits (a zero flag byte marks a fully valid fit)
FLAG_UNMASKED = 1
FLAG_NOT_CONVERGED = 2
FLAG_AT_BOUNDARY = 4
FLAG_LOW_SIGNAL = 8
FLAG_SINGULAR = 16

_COND_LIMIT = 1e12
_BOUNDARY_REL = 1e-9


@dataclass(frozen=True)
class BoundsBox:
    """Fit box: f in [f_min, f_max] mL/min/100g, att in [att_min, att_max] s."""

    f_min: float
    f_max: float
    att_min: float
    att_max: float

    def __post_init__(self):
        if not (0.0 <= self.f_min < self.f_max):
            raise ValueError(f"need 0 <= f_min < f_max, got [{self.f_min}, {self.f_max}]")
        if not (0.0 <= self.att_min < self.att_max):
            raise ValueError(f"need 0 <= att_min < att_max, got [{self.att_min}, {self.att_max}]")

    @classmethod
    def brain(cls) -> "BoundsBox":
        return cls(0.0, 150.0, 0.0, 2.0)

    @classmethod
    def kidney(cls) -> "BoundsBox":
        return cls(0.0, 900.0, 0.0, 2.0)

    @property
    def f_range(self) -> float:
        return self.f_max - self.f_min

    @property
    def att_range(self) -> float:
        return self.att_max - self.att_min


@dataclass(frozen=True)
class FitOptions:
    grid_shape: tuple[int, int] = (32, 32)
    tol_g: float = 1e-8
    tol_x: float = 1e-10
    max_iter: int = 200
    max_halvings: int = 30

    def __post_init__(self):
        if self.grid_shape[0] < 16 or self.grid_shape[1] < 16:
            raise ValueError(f"grid_shape must be at least 16x16, got {self.grid_shape}")


@dataclass
class VoxelSeries:
    """N x M magnitude measurements of one voxel plus its protocol."""

    data: np.ndarray
    protocol: Protocol

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError(f"data must be N x M, got shape {self.data.shape}")
        if self.data.shape[0] != self.protocol.n_plds:
            raise ValueError(
                f"data has {self.data.shape[0]} rows but protocol has "
                f"{self.protocol.n_plds} PLDs")
        if self.data.shape[1] < 1:
            raise ValueError("need at least one repetition")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("data must be finite")

    @property
    def n_reps(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FitResult:
    theta_hat: KineticParams
    sse: float
    converged: bool
    at_boundary: bool
    n_iterations: int


@dataclass
class FitMaps:
    """Voxelwise fit output: parameter maps plus a flag map."""

    f: np.ndarray
    att: np.ndarray
    sse: np.ndarray
    flags: np.ndarray
    n_iterations: np.ndarray

    @property
    def fit_valid(self) -> np.ndarray:
        return self.flags == 0


def negative_log_likelihood(series: VoxelSeries, params: KineticParams,
                            sigma: float) -> float:
    """Gaussian negative log-likelihood of all N*M samples."""
    curve = batch_curves(np.array([params.f]), np.array([params.att]),
                         series.protocol)[0]
    resid = series.data - curve[:, None]
    n_total = series.data.size
    return float(np.sum(resid ** 2) / (2.0 * sigma ** 2)
                 + 0.5 * n_total * math.log(2.0 * math.pi * sigma ** 2))


def _grid_axes(box: BoundsBox, grid_shape):
    return (np.linspace(box.f_min, box.f_max, grid_shape[0]),
            np.linspace(box.att_min, box.att_max, grid_shape[1]))


def _batch_grid_init(ybar: np.ndarray, protocol: Protocol, box: BoundsBox,
                     grid_shape, t1=None) -> np.ndarray:
    """Best grid node per voxel against the per-PLD mean, (V, 2).

    Nodes are scanned in (f, att) lexicographic order and ties resolve to
    the first minimum, i.e. the lowest node.
    """
    f_nodes, att_nodes = _grid_axes(box, grid_shape)
    ff = np.repeat(f_nodes, len(att_nodes))
    aa = np.tile(att_nodes, len(f_nodes))
    v = ybar.shape[0]
    if t1 is None:
        curves = batch_curves(ff, aa, protocol)  # (K, N)
        sse = (np.sum(ybar ** 2, axis=1)[:, None]
               - 2.0 * ybar @ curves.T
               + np.sum(curves ** 2, axis=1)[None, :])
        best = np.argmin(sse, axis=1)
    else:
        # per-voxel T1: stream over nodes to keep memory flat
        best = np.zeros(v, dtype=int)
        best_sse = np.full(v, np.inf)
        fv = np.empty(v)
        av = np.empty(v)
        for idx in range(len(ff)):
            fv.fill(ff[idx])
            av.fill(aa[idx])
            curve = batch_curves(fv, av, protocol, t1=t1)
            sse = np.sum((ybar - curve) ** 2, axis=1)
            better = sse < best_sse
            best[better] = idx
            best_sse[better] = sse[better]
    return np.stack([ff[best], aa[best]], axis=1)


def grid_initialize(series: VoxelSeries, protocol: Protocol, box: BoundsBox,
                    grid_shape=(32, 32)) -> KineticParams:
    """Grid node minimizing SSE against the per-PLD mean of the series."""
    ybar = series.data.mean(axis=1)[None, :]
    theta = _batch_grid_init(ybar, protocol, box, grid_shape)
    return KineticParams(float(theta[0, 0]), float(theta[0, 1]))


def _avoid_kinks(att: np.ndarray, times: np.ndarray, tau: float,
                 box: BoundsBox) -> np.ndarray:
    """Nudge att values off sample-time kinks (derivative undefined there)."""
    att = att.copy()
    for _ in range(3):
        d = np.min(np.minimum(np.abs(times[None, :] - att[:, None]),
                              np.abs(times[None, :] - tau - att[:, None])),
                   axis=1)
        near = d < KINK_EPS
        if not near.any():
            break
        shift = np.where(att + 2 * KINK_EPS <= box.att_max, KINK_EPS, -KINK_EPS)
        att[near] = att[near] + shift[near]
    return att


def _clip_theta(theta: np.ndarray, box: BoundsBox) -> np.ndarray:
    out = theta.copy()
    out[:, 0] = np.clip(out[:, 0], box.f_min, box.f_max)
    out[:, 1] = np.clip(out[:, 1], box.att_min, box.att_max)
    return out


def _batch_fit(ybar: np.ndarray, protocol: Protocol, box: BoundsBox,
               options: FitOptions, t1=None):
    """Projected Gauss-Newton over a batch of per-PLD mean curves.

    Returns dict with theta (V, 2), sse_mean (sum over PLDs of squared mean
    residuals), converged, singular, n_iter arrays.
    """
    v = ybar.shape[0]
    times = sample_times(protocol)
    theta = _batch_grid_init(ybar, protocol, box, options.grid_shape, t1=t1)
    rngs = np.array([box.f_range, box.att_range])

    def sse_of(th, rows=None):
        t1v = None if t1 is None else (t1 if rows is None else t1[rows])
        curves = batch_curves(th[:, 0], th[:, 1], protocol, t1=t1v)
        yb = ybar if rows is None else ybar[rows]
        return np.sum((yb - curves) ** 2, axis=1)

    sse = sse_of(theta)
    converged = np.zeros(v, dtype=bool)
    singular = np.zeros(v, dtype=bool)
    n_iter = np.zeros(v, dtype=int)
    active = np.ones(v, dtype=bool)

    for _ in range(options.max_iter):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        th = theta[rows]
        th[:, 1] = _avoid_kinks(th[:, 1], times, protocol.tau, box)
        t1v = None if t1 is None else t1[rows]
        curves, jf, ja = batch_jacobian(th[:, 0], th[:, 1], protocol, t1=t1v)
        r = ybar[rows] - curves
        sse_cur = np.sum(r * r, axis=1)

        # work in range-scaled parameters so the 2x2 normal equations carry
        # uniform units (the raw matrix mixes f- and att-units)
        jfs = jf * rngs[0]
        jas = ja * rngs[1]
        gf = np.sum(jfs * r, axis=1)
        ga = np.sum(jas * r, axis=1)
        a = np.sum(jfs * jfs, axis=1)
        b = np.sum(jfs * jas, axis=1)
        c = np.sum(jas * jas, axis=1)
        half_tr = 0.5 * (a + c)
        disc = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
        lmax = half_tr + disc
        lmin = half_tr - disc
        det = a * c - b * b

        # gradient test against the curvature scale: near the optimum
        # g ~ (J'J) dtheta in scaled coordinates, so this bounds the
        # remaining scaled parameter error by ~tol_g * cond
        grad_ok = np.maximum(np.abs(gf), np.abs(ga)) <= options.tol_g * lmax
        if grad_ok.any():
            done = rows[grad_ok]
            theta[done] = th[grad_ok]
            sse[done] = sse_cur[grad_ok]
            converged[done] = True
            active[done] = False
            keep = ~grad_ok
            rows, th, r = rows[keep], th[keep], r[keep]
            sse_cur, gf, ga = sse_cur[keep], gf[keep], ga[keep]
            a, b, c = a[keep], b[keep], c[keep]
            lmax, lmin, det = lmax[keep], lmin[keep], det[keep]
            if rows.size == 0:
                continue
        bad = (lmin <= 0.0) | (lmax > _COND_LIMIT * np.maximum(lmin, 0.0)) \
            | ~np.isfinite(det)
        singular[rows[bad]] = True
        safe_det = np.where(bad, 1.0, det)
        step_f = np.where(bad, gf / np.maximum(lmax, 1e-300),
                          (c * gf - b * ga) / safe_det)
        step_a = np.where(bad, ga / np.maximum(lmax, 1e-300),
                          (a * ga - b * gf) / safe_det)
        # back to native units
        delta = np.stack([step_f * rngs[0], step_a * rngs[1]], axis=1)

        # backtracking halving: accept the first strict SSE decrease
        alpha = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        cand = np.empty_like(th)
        cand_sse = np.empty(rows.size)
        for _h in range(options.max_halvings + 1):
            trial_rows = ~accepted
            if not trial_rows.any():
                break
            trial = _clip_theta(th[trial_rows] + alpha[trial_rows, None]
                                * delta[trial_rows], box)
            sse_trial = sse_of(trial, rows=rows[trial_rows])
            good = sse_trial < sse_cur[trial_rows]
            tr_idx = np.flatnonzero(trial_rows)
            hit = tr_idx[good]
            cand[hit] = trial[good]
            cand_sse[hit] = sse_trial[good]
            accepted[hit] = True
            alpha[tr_idx[~good]] *= 0.5

        stalled_rows = rows[~accepted]
        if stalled_rows.size:
            theta[stalled_rows] = th[~accepted]
            sse[stalled_rows] = sse_cur[~accepted]
            active[stalled_rows] = False

        ok = np.flatnonzero(accepted)
        if ok.size == 0:
            continue
        new_th = cand[ok]
        step = np.abs(new_th - th[ok]) / rngs[None, :]
        moved_rows = rows[ok]
        theta[moved_rows] = new_th
        sse[moved_rows] = cand_sse[ok]
        n_iter[moved_rows] += 1
        small = np.max(step, axis=1) < options.tol_x
        converged[moved_rows[small]] = True
        active[moved_rows[small]] = False

    at_boundary = (
        (theta[:, 0] - box.f_min <= _BOUNDARY_REL * rngs[0])
        | (box.f_max - theta[:, 0] <= _BOUNDARY_REL * rngs[0])
        | (theta[:, 1] - box.att_min <= _BOUNDARY_REL * rngs[1])
        | (box.att_max - theta[:, 1] <= _BOUNDARY_REL * rngs[1]))
    return {"theta": theta, "sse_mean": sse, "converged": converged,
            "singular": singular, "n_iter": n_iter, "at_boundary": at_boundary}


def is_low_signal(fitted_curve: np.ndarray, sigma: float, m: int) -> bool:
    """Identifiability guard: peak fitted amplitude below 3 sigma/sqrt(M)."""
    return bool(np.max(np.abs(fitted_curve)) < 3.0 * sigma / math.sqrt(m))


def mle_fit(series: VoxelSeries, protocol: Protocol, box: BoundsBox,
            options: FitOptions | None = None) -> FitResult:
    """Box-constrained least-squares fit of one voxel.

    Raises SingularNormalEquations only when the Gauss-Newton system was
    singular and the gradient fallback also failed to make progress.
    """
    options = options or FitOptions()
    ybar = series.data.mean(axis=1)[None, :]
    out = _batch_fit(ybar, protocol, box, options)
    m = series.n_reps
    spread = float(np.sum((series.data - series.data.mean(axis=1)[:, None]) ** 2))
    sse = m * float(out["sse_mean"][0]) + spread
    if out["singular"][0] and not out["converged"][0]:
        raise SingularNormalEquations(
            "normal equations singular and gradient fallback stalled")
    return FitResult(
        theta_hat=KineticParams(float(out["theta"][0, 0]),
                                float(out["theta"][0, 1])),
        sse=sse,
        converged=bool(out["converged"][0]),
        at_boundary=bool(out["at_boundary"][0]),
        n_iterations=int(out["n_iter"][0]),
    )


def resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def fit_map(data: np.ndarray, mask: np.ndarray, protocol: Protocol,
            box: BoundsBox, options: FitOptions | None = None,
            threads: int | None = None, t1_map=None) -> FitMaps:
    """Fit every masked voxel of a (V, N, M) array.

    Unmasked voxels carry zero parameters and the unmasked flag; per-voxel
    failures are flagged, never raised, so one bad voxel cannot abort a
    map. Output is identical for any thread count (voxels are chunked and
    written back by index).
    """
    options = options or FitOptions()
    data = np.asarray(data, dtype=float)
    v, n, m = data.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (v,):
        raise ValueError(f"mask shape {mask.shape} does not match {v} voxels")

    f = np.zeros(v)
    att = np.zeros(v)
    sse = np.zeros(v)
    flags = np.full(v, FLAG_UNMASKED, dtype=np.uint8)
    n_iterations = np.zeros(v, dtype=int)

    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return FitMaps(f, att, sse, flags, n_iterations)

    ybar_all = data[rows].mean(axis=2)
    spread_all = np.sum((data[rows] - ybar_all[:, :, None]) ** 2, axis=(1, 2))
    t1_rows = None if t1_map is None else np.asarray(t1_map, dtype=float)[rows]

    n_threads = resolve_threads(threads)
    chunks = np.array_split(np.arange(rows.size), min(n_threads, rows.size))

    def run(chunk):
        t1c = None if t1_rows is None else t1_rows[chunk]
        return _batch_fit(ybar_all[chunk], protocol, box, options, t1=t1c)

    if n_threads == 1 or len(chunks) == 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run, chunks))

    for chunk, out in zip(chunks, results):
        idx = rows[chunk]
        f[idx] = out["theta"][:, 0]
        att[idx] = out["theta"][:, 1]
        sse[idx] = m * out["sse_mean"] + spread_all[chunk]
        n_iterations[idx] = out["n_iter"]
        flag = np.zeros(len(chunk), dtype=np.uint8)
        flag |= np.where(out["converged"], 0, FLAG_NOT_CONVERGED).astype(np.uint8)
        flag |= np.where(out["at_boundary"], FLAG_AT_BOUNDARY, 0).astype(np.uint8)
        flag |= np.where(out["singular"] & ~out["converged"], FLAG_SINGULAR,
                         0).astype(np.uint8)
        t1c = None if t1_rows is None else t1_rows[chunk]
        fitted = batch_curves(out["theta"][:, 0], out["theta"][:, 1],
                              protocol, t1=t1c)
        low = np.max(np.abs(fitted), axis=1) < 3.0 * protocol.sigma / math.sqrt(m)
        flag |= np.where(low, FLAG_LOW_SIGNAL, 0).astype(np.uint8)
        flags[idx] = flag

    return FitMaps(f, att, sse, flags, n_iterations)
