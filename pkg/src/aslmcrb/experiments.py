"""The three studies: asymptotic convergence, subset consistency, fixed-T1.

Each study is a deterministic function of (dataset, seed): bootstrap index
draws come from dedicated counter-based streams and voxel aggregation runs
in fixed index order, so tables are reproducible across runs and thread
counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from dataclasses import field

import numpy as np

from . import rng
from .bounds import BoundsMaps, batch_bounds, crb_diag_batch
from .dataset import VoxelDataset
from .fitting import BoundsBox, FitMaps, FitOptions, fit_map
from .kinetic import Protocol
from .tables import ExperimentTable

REF_TRUTH = "truth"
REF_FULL_FIT = "full_fit"

# relative-error denominators are floored at this value (native units) to
# keep near-zero-perfusion voxels from blowing up the average
REL_ERR_EPS = 1e-3


@dataclass(frozen=True)
class ConvergenceRow:
    """Aggregates for one repetition count m.

    bias_* and var_* are medians across valid voxels of |bootstrap-mean
    deviation from the reference| and of the unbiased bootstrap variance;
    *_mean carry the mean aggregates of the same per-voxel quantities.
    """

    m: int
    bias_f: float
    bias_att: float
    var_f: float
    var_att: float
    lambda_max_mean: float
    lambda_min_mean: float
    lambda_max_median: float
    lambda_min_median: float
    kappa_mean: float
    excluded_fraction: float
    bias_f_mean: float
    bias_att_mean: float
    var_f_mean: float
    var_att_mean: float


CONVERGENCE_COLUMNS = [
    "m (count)",
    "bias_f (mL/min/100g)",
    "bias_att (s)",
    "var_f ((mL/min/100g)^2)",
    "var_att (s^2)",
    "lambda_max_mean (1)",
    "lambda_min_mean (1)",
    "lambda_max_median (1)",
    "lambda_min_median (1)",
    "kappa_mean (1)",
    "excluded_fraction (1)",
    "bias_f_mean (mL/min/100g)",
    "bias_att_mean (s)",
    "var_f_mean ((mL/min/100g)^2)",
    "var_att_mean (s^2)",
]


def bootstrap_indices(m: int, k: int, seed: int) -> np.ndarray:
    """k with-replacement resamplings of {0..m-1}, shape (k, m).

    Row j is a pure function of (seed, m, j); the PLD axis is never
    resampled.
    """
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = np.empty((k, m), dtype=np.intp)
    for j in range(k):
        g = rng.stream(seed, rng.DOMAIN_BOOTSTRAP, c1=m, c3=j)
        out[j] = g.integers(0, m, size=m)
    return out


def _nan_median(x: np.ndarray) -> float:
    return float(np.median(x)) if x.size else float("nan")


def _nan_mean(x: np.ndarray) -> float:
    return float(np.mean(x)) if x.size else float("nan")


def convergence_study(dataset: VoxelDataset, protocol: Protocol,
                      ms, k: int, seed: int,
                      reference: str = REF_TRUTH, *, box: BoundsBox,
                      options: FitOptions | None = None,
                      threads: int | None = None,
                      t1_map=None) -> list[ConvergenceRow]:
    """Bias/variance/eigenvalue convergence over repetition counts.

    For each m: the first m repetitions are bootstrap-resampled k times;
    each realization is refit and its voxel bound report recomputed. Per
    voxel, bias is the mean over realizations of (theta_hat - reference)
    and variance the unbiased sample variance over realizations; voxels
    enter an aggregate only when every realization was valid for it.
    """
    data = np.asarray(dataset.data, dtype=float)
    v, n, m_total = data.shape
    mask = dataset.mask
    ms = [int(m) for m in ms]
    if ms and max(ms) > m_total:
        raise ValueError(f"max(ms)={max(ms)} exceeds M_total={m_total}")

    if reference == REF_TRUTH:
        if dataset.truth_f is None or dataset.truth_att is None:
            raise ValueError("reference='truth' needs truth maps")
        ref_f = np.asarray(dataset.truth_f, dtype=float)
        ref_att = np.asarray(dataset.truth_att, dtype=float)
        ref_valid = mask.copy()
    elif reference == REF_FULL_FIT:
        full = fit_map(data, mask, protocol, box, options, threads,
                       t1_map=t1_map)
        ref_f, ref_att = full.f, full.att
        ref_valid = full.fit_valid
    else:
        raise ValueError(f"unknown reference {reference!r}")

    n_masked = int(mask.sum())
    rows = []
    for m in ms:
        sub = data[:, :, :m]
        idx = bootstrap_indices(m, k, seed)
        th_f = np.full((k, v), np.nan)
        th_att = np.full((k, v), np.nan)
        lam_max = np.full((k, v), np.nan)
        lam_min = np.full((k, v), np.nan)
        kappa = np.full((k, v), np.nan)
        n_bounds_valid = 0
        for b in range(k):
            db = sub[:, :, idx[b]]
            maps = fit_map(db, mask, protocol, box, options, threads,
                           t1_map=t1_map)
            ok = maps.fit_valid
            th_f[b, ok] = maps.f[ok]
            th_att[b, ok] = maps.att[ok]
            bnd = batch_bounds(db, maps.f, maps.att, ok, protocol,
                               t1_map=t1_map)
            good = bnd.valid
            lam_max[b, good] = bnd.lambda_max[good]
            lam_min[b, good] = bnd.lambda_min[good]
            kappa[b, good] = bnd.kappa[good]
            n_bounds_valid += int(good.sum())

        fit_all = ~np.isnan(th_f).any(axis=0) & ref_valid
        # shifted forms are mathematically identical but preserve exact
        # zeros (the mean of k identical values need not equal them bitwise)
        bias_f_vox = np.abs((th_f[:, fit_all] - ref_f[fit_all]).mean(axis=0))
        bias_att_vox = np.abs((th_att[:, fit_all] - ref_att[fit_all]).mean(axis=0))
        if k >= 2:
            var_f_vox = (th_f[:, fit_all] - th_f[0, fit_all]).var(axis=0, ddof=1)
            var_att_vox = (th_att[:, fit_all] - th_att[0, fit_all]).var(axis=0, ddof=1)
        else:
            var_f_vox = np.zeros(fit_all.sum())
            var_att_vox = np.zeros(fit_all.sum())

        bnd_all = ~np.isnan(lam_max).any(axis=0)
        lmax_vox = lam_max[:, bnd_all].mean(axis=0)
        lmin_vox = lam_min[:, bnd_all].mean(axis=0)
        kappa_vox = kappa[:, bnd_all].mean(axis=0)
        excluded = 1.0 - n_bounds_valid / (k * n_masked) if n_masked else float("nan")

        rows.append(ConvergenceRow(
            m=m,
            bias_f=_nan_median(bias_f_vox),
            bias_att=_nan_median(bias_att_vox),
            var_f=_nan_median(var_f_vox),
            var_att=_nan_median(var_att_vox),
            lambda_max_mean=_nan_mean(lmax_vox),
            lambda_min_mean=_nan_mean(lmin_vox),
            lambda_max_median=_nan_median(lmax_vox),
            lambda_min_median=_nan_median(lmin_vox),
            kappa_mean=_nan_mean(kappa_vox),
            excluded_fraction=excluded,
            bias_f_mean=_nan_mean(bias_f_vox),
            bias_att_mean=_nan_mean(bias_att_vox),
            var_f_mean=_nan_mean(var_f_vox),
            var_att_mean=_nan_mean(var_att_vox),
        ))
    return rows


def convergence_table(rows: list[ConvergenceRow]) -> ExperimentTable:
    table = ExperimentTable(columns=list(CONVERGENCE_COLUMNS))
    for r in rows:
        table.rows.append([
            r.m, r.bias_f, r.bias_att, r.var_f, r.var_att,
            r.lambda_max_mean, r.lambda_min_mean, r.lambda_max_median,
            r.lambda_min_median, r.kappa_mean, r.excluded_fraction,
            r.bias_f_mean, r.bias_att_mean, r.var_f_mean, r.var_att_mean,
        ])
    return table


# ---------------------------------------------------------------------------
# subset consistency

def subset_partition(plds) -> tuple[np.ndarray, np.ndarray]:
    """Split PLDs into an early-weighted set1 and its complement set2.

    set1 holds ceil(N/2) PLDs: a zero PLD (if present) plus the nearest
    unassigned PLDs to geometric targets t_lo * (t_hi/t_lo)**(j/need),
    j = 0..need-1, which stay below t_hi, so set1 is denser at early
    times. Ties go to the earlier PLD. Deterministic.
    """
    plds = np.asarray(plds, dtype=float)
    n = plds.size
    if n < 4:
        raise ValueError(f"need at least 4 PLDs, got {n}")
    if np.any(np.diff(plds) <= 0.0):
        raise ValueError("plds must be strictly increasing")
    n1 = math.ceil(n / 2)
    assigned = np.zeros(n, dtype=bool)
    if plds[0] == 0.0:
        assigned[0] = True
        need = n1 - 1
    else:
        need = n1
    positive = plds[plds > 0.0]
    t_lo, t_hi = positive[0], positive[-1]
    ratio = t_hi / t_lo
    for j in range(need):
        target = t_lo * ratio ** (j / need)
        free = np.flatnonzero(~assigned)
        dist = np.abs(plds[free] - target)
        assigned[free[np.argmin(dist)]] = True  # argmin takes the earlier tie
    return plds[assigned], plds[~assigned]


@dataclass(frozen=True)
class SubsetVarianceRow:
    subset: int          # 1 or 2
    m: int
    var_f: float         # median over voxels of bootstrap variance
    var_att: float
    crb_f: float         # median over voxels of theoretical CRB diagonal
    crb_att: float
    excluded_fraction: float


SUBSET_VARIANCE_COLUMNS = [
    "subset (1|2)",
    "m (count)",
    "var_f ((mL/min/100g)^2)",
    "var_att (s^2)",
    "crb_f ((mL/min/100g)^2)",
    "crb_att (s^2)",
    "excluded_fraction (1)",
]


@dataclass
class SubsetReport:
    set1_plds: np.ndarray
    set2_plds: np.ndarray
    maps_1: FitMaps
    maps_2: FitMaps
    relative_error_f: np.ndarray
    relative_error_att: np.ndarray
    valid: np.ndarray
    mean_relative_error_f: float
    mean_relative_error_att: float
    variance_rows: list[SubsetVarianceRow] = field(default_factory=list)


def subset_variance_table(rows: list[SubsetVarianceRow]) -> ExperimentTable:
    table = ExperimentTable(columns=list(SUBSET_VARIANCE_COLUMNS))
    for r in rows:
        table.rows.append([r.subset, r.m, r.var_f, r.var_att, r.crb_f,
                           r.crb_att, r.excluded_fraction])
    return table


def subset_consistency(dataset: VoxelDataset, protocol: Protocol, k: int,
                       seed: int, *, box: BoundsBox,
                       options: FitOptions | None = None,
                       threads: int | None = None,
                       ms=None) -> SubsetReport:
    """Fit the two PLD subsets independently and compare the estimates.

    Per-voxel relative error |theta_1 - theta_2| / max(|theta_2|, eps) is
    averaged over voxels valid in both subset fits. For each m in ms,
    bootstrap variances of each subset's estimates are tabulated next to
    the theoretical CRB at the subset's full fit.
    """
    set1, set2 = subset_partition(protocol.plds)
    plds = np.asarray(protocol.plds)
    idx1 = np.flatnonzero(np.isin(plds, set1))
    idx2 = np.flatnonzero(np.isin(plds, set2))
    mask = dataset.mask
    m_total = dataset.dims[2]

    reports = []
    for subset_id, idx in ((1, idx1), (2, idx2)):
        sub_proto = dc_replace(protocol, plds=tuple(plds[idx]))
        sub_data = np.asarray(dataset.data[:, idx, :], dtype=float)
        maps = fit_map(sub_data, mask, sub_proto, box, options, threads)
        reports.append((subset_id, idx, sub_proto, sub_data, maps))

    maps_1 = reports[0][4]
    maps_2 = reports[1][4]
    valid = maps_1.fit_valid & maps_2.fit_valid
    rel_f = np.full(dataset.dims[0], np.nan)
    rel_att = np.full(dataset.dims[0], np.nan)
    rel_f[valid] = (np.abs(maps_1.f[valid] - maps_2.f[valid])
                    / np.maximum(np.abs(maps_2.f[valid]), REL_ERR_EPS))
    rel_att[valid] = (np.abs(maps_1.att[valid] - maps_2.att[valid])
                      / np.maximum(np.abs(maps_2.att[valid]), REL_ERR_EPS))

    variance_rows = []
    if ms is None:
        ms = range(2, m_total + 1)
    for subset_id, idx, sub_proto, sub_data, maps in reports:
        eligible = maps.fit_valid
        crb_f1, crb_att1 = crb_diag_batch(maps.f, maps.att, eligible,
                                          sub_proto, 1)
        for m in ms:
            m = int(m)
            boot = bootstrap_indices(m, k, seed)
            th_f = np.full((k, dataset.dims[0]), np.nan)
            th_att = np.full((k, dataset.dims[0]), np.nan)
            for b in range(k):
                db = sub_data[:, :, :m][:, :, boot[b]]
                bm = fit_map(db, mask, sub_proto, box, options, threads)
                ok = bm.fit_valid
                th_f[b, ok] = bm.f[ok]
                th_att[b, ok] = bm.att[ok]
            all_ok = ~np.isnan(th_f).any(axis=0) & eligible
            var_f = th_f[:, all_ok].var(axis=0, ddof=1)
            var_att = th_att[:, all_ok].var(axis=0, ddof=1)
            crb_ok = all_ok & np.isfinite(crb_f1)
            n_masked = int(mask.sum())
            variance_rows.append(SubsetVarianceRow(
                subset=subset_id, m=m,
                var_f=_nan_median(var_f),
                var_att=_nan_median(var_att),
                crb_f=_nan_median(crb_f1[crb_ok] / m),
                crb_att=_nan_median(crb_att1[crb_ok] / m),
                excluded_fraction=(1.0 - all_ok.sum() / n_masked
                                   if n_masked else float("nan")),
            ))

    return SubsetReport(
        set1_plds=set1, set2_plds=set2, maps_1=maps_1, maps_2=maps_2,
        relative_error_f=rel_f, relative_error_att=rel_att, valid=valid,
        mean_relative_error_f=_nan_mean(rel_f[valid]),
        mean_relative_error_att=_nan_mean(rel_att[valid]),
        variance_rows=variance_rows,
    )


# ---------------------------------------------------------------------------
# fixed-T1 experiment

@dataclass
class T1ExperimentResult:
    t1_map: np.ndarray               # per-voxel assumed T1 in the voxelwise arm
    top_voxels: np.ndarray           # bool, received t1_alt
    maps_global: FitMaps
    bounds_global: BoundsMaps
    maps_voxelwise: FitMaps
    bounds_voxelwise: BoundsMaps
    joint_valid: np.ndarray
    diff_lambda_max: np.ndarray      # global - voxelwise, NaN where invalid
    diff_lambda_min: np.ndarray
    diff_kappa: np.ndarray
    mean_lambda_max_global: float
    mean_lambda_max_voxelwise: float
    mean_lambda_min_global: float
    mean_lambda_min_voxelwise: float
    mean_kappa_global: float
    mean_kappa_voxelwise: float


T1_COLUMNS = [
    "voxel (index)",
    "t1_assigned (s)",
    "lambda_max_global (1)",
    "lambda_min_global (1)",
    "kappa_global (1)",
    "lambda_max_voxelwise (1)",
    "lambda_min_voxelwise (1)",
    "kappa_voxelwise (1)",
    "diff_lambda_max (1)",
    "diff_lambda_min (1)",
    "diff_kappa (1)",
]


def t1_experiment(dataset: VoxelDataset, protocol: Protocol,
                  t1_global: float, t1_alt: float,
                  top_fraction: float = 0.10, *, box: BoundsBox,
                  options: FitOptions | None = None,
                  threads: int | None = None) -> T1ExperimentResult:
    """Global-T1 versus voxelwise-T1 eigenvalue comparison on one dataset.

    Voxel intensity is the mean over all PLDs and repetitions; the top
    ceil(top_fraction * masked count) masked voxels receive t1_alt in the
    voxelwise arm. Both arms fit and bound the same data.
    """
    if not 0.0 < top_fraction < 1.0:
        raise ValueError(f"top_fraction must be in (0, 1), got {top_fraction}")
    data = np.asarray(dataset.data, dtype=float)
    v = data.shape[0]
    mask = dataset.mask
    intensity = data.mean(axis=(1, 2))
    masked_idx = np.flatnonzero(mask)
    n_top = math.ceil(top_fraction * masked_idx.size)
    order = masked_idx[np.argsort(-intensity[masked_idx], kind="stable")]
    top = np.zeros(v, dtype=bool)
    top[order[:n_top]] = True

    t1_map = np.full(v, float(t1_global))
    t1_map[top] = float(t1_alt)

    proto_global = dc_replace(protocol, t1_tissue=float(t1_global))
    arms = {}
    for label, t1v in (("global", None), ("voxelwise", t1_map)):
        maps = fit_map(data, mask, proto_global, box, options, threads,
                       t1_map=t1v)
        bnd = batch_bounds(data, maps.f, maps.att, maps.fit_valid,
                           proto_global, t1_map=t1v)
        arms[label] = (maps, bnd)

    bg = arms["global"][1]
    bv = arms["voxelwise"][1]
    joint = bg.valid & bv.valid
    diff_lmax = np.where(joint, bg.lambda_max - bv.lambda_max, np.nan)
    diff_lmin = np.where(joint, bg.lambda_min - bv.lambda_min, np.nan)
    diff_kappa = np.where(joint, bg.kappa - bv.kappa, np.nan)

    return T1ExperimentResult(
        t1_map=t1_map, top_voxels=top,
        maps_global=arms["global"][0], bounds_global=bg,
        maps_voxelwise=arms["voxelwise"][0], bounds_voxelwise=bv,
        joint_valid=joint,
        diff_lambda_max=diff_lmax, diff_lambda_min=diff_lmin,
        diff_kappa=diff_kappa,
        mean_lambda_max_global=_nan_mean(bg.lambda_max[joint]),
        mean_lambda_max_voxelwise=_nan_mean(bv.lambda_max[joint]),
        mean_lambda_min_global=_nan_mean(bg.lambda_min[joint]),
        mean_lambda_min_voxelwise=_nan_mean(bv.lambda_min[joint]),
        mean_kappa_global=_nan_mean(bg.kappa[joint]),
        mean_kappa_voxelwise=_nan_mean(bv.kappa[joint]),
    )


def t1_table(result: T1ExperimentResult) -> ExperimentTable:
    table = ExperimentTable(columns=list(T1_COLUMNS))
    bg, bv = result.bounds_global, result.bounds_voxelwise
    for i in range(result.t1_map.size):
        def cell(x):
            return None if not np.isfinite(x) else float(x)
        table.rows.append([
            i, result.t1_map[i],
            cell(bg.lambda_max[i]), cell(bg.lambda_min[i]), cell(bg.kappa[i]),
            cell(bv.lambda_max[i]), cell(bv.lambda_min[i]), cell(bv.kappa[i]),
            cell(result.diff_lambda_max[i]), cell(result.diff_lambda_min[i]),
            cell(result.diff_kappa[i]),
        ])
    return table


def bootstrap_var_crb_ratio(dataset: VoxelDataset, protocol: Protocol,
                            m: int, k: int, seed: int, *, box: BoundsBox,
                            options: FitOptions | None = None,
                            threads: int | None = None) -> dict:
    """Median over voxels of bootstrap variance / theoretical CRB at m.

    The CRB is evaluated at the full-data fit of the first m repetitions.
    Returns {"f": ratio, "att": ratio, "n_voxels": count}.
    """
    data = np.asarray(dataset.data, dtype=float)[:, :, :m]
    mask = dataset.mask
    full = fit_map(data, mask, protocol, box, options, threads)
    eligible = full.fit_valid
    crb_f, crb_att = crb_diag_batch(full.f, full.att, eligible, protocol, m)
    boot = bootstrap_indices(m, k, seed)
    v = data.shape[0]
    th_f = np.full((k, v), np.nan)
    th_att = np.full((k, v), np.nan)
    for b in range(k):
        maps = fit_map(data[:, :, boot[b]], mask, protocol, box, options,
                       threads)
        ok = maps.fit_valid
        th_f[b, ok] = maps.f[ok]
        th_att[b, ok] = maps.att[ok]
    all_ok = ~np.isnan(th_f).any(axis=0) & eligible & np.isfinite(crb_f)
    var_f = th_f[:, all_ok].var(axis=0, ddof=1)
    var_att = th_att[:, all_ok].var(axis=0, ddof=1)
    return {
        "f": _nan_median(var_f / crb_f[all_ok]),
        "att": _nan_median(var_att / crb_att[all_ok]),
        "n_voxels": int(all_ok.sum()),
    }
