"""Classical and sandwich covariance bounds with a whitened comparison.

Per voxel, the per-repetition score outer products and log-likelihood
Hessians of the assumed Gaussian model are averaged into B_hat and A_hat.
-A_hat**-1/M is the empirical classical bound, A**-1 B A**-1 / M the
sandwich bound that stays valid when the assumed signal model is wrong.
Whitening the sandwich bound by the classical one gives a matrix whose
eigenvalues equal 1 exactly when the two bounds agree; their ratio (the
condition number) is the scalar misspecification summary.

All 2x2 eigen decompositions, inverses and inverse square roots use closed
forms: no iterative linear algebra, so results are deterministic and cheap
enough for per-voxel maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateEigen,
    NotNegativeDefinite,
    NotPositiveDefinite,
    SingularInformation,
)
from .fitting import VoxelSeries
from .kinetic import (
    KINK_EPS,
    KineticParams,
    Protocol,
    batch_hessians,
    batch_jacobian,
    sample_times,
)

_COND_LIMIT = 1e12
_EIG_FLOOR = 1e-15

# per-voxel status codes for batched bound computation
STATUS_OK = 0
STATUS_SKIPPED = 1        # voxel not eligible (bad fit, unmasked, ...)
STATUS_KINK = 2
STATUS_NOT_NEG_DEF = 3
STATUS_NOT_SPD = 4
STATUS_DEGENERATE = 5


@dataclass(frozen=True)
class BoundsReport:
    """Per-voxel bound summary; 2x2 matrices in native parameter units."""

    a_hat: np.ndarray
    b_hat: np.ndarray
    c_crb_empirical: np.ndarray
    c_crb_theoretical: np.ndarray
    c_mcrb: np.ndarray
    p_hat: np.ndarray
    lambda_max: float
    lambda_min: float
    kappa: float
    m_used: int


# ---------------------------------------------------------------------------
# closed-form symmetric 2x2 helpers, vectorized over leading axes.
# matrices are carried as component triples (a11, a12, a22).

def _eig_sym2(a11, a12, a22):
    """Eigenvalues (descending) of symmetric 2x2, closed form."""
    half_tr = 0.5 * (a11 + a22)
    disc = np.sqrt(np.maximum((0.5 * (a11 - a22)) ** 2 + a12 ** 2, 0.0))
    return half_tr + disc, half_tr - disc


def _rot_sym2(a11, a12, a22):
    """Rotation (cos, sin) diagonalizing symmetric 2x2: R^T A R = diag."""
    ang = 0.5 * np.arctan2(2.0 * a12, a11 - a22)
    return np.cos(ang), np.sin(ang)


def _inv_sym2(a11, a12, a22):
    det = a11 * a22 - a12 ** 2
    return a22 / det, -a12 / det, a11 / det


def _invsqrt_sym2(a11, a12, a22):
    """Components of A**-1/2 for SPD A via closed-form eigendecomposition."""
    l1, l2 = _eig_sym2(a11, a12, a22)
    ct, st = _rot_sym2(a11, a12, a22)
    # eigenvector of l1 for the atan2 rotation is (ct, st)
    d1 = 1.0 / np.sqrt(l1)
    d2 = 1.0 / np.sqrt(l2)
    w11 = ct * ct * d1 + st * st * d2
    w12 = ct * st * (d1 - d2)
    w22 = st * st * d1 + ct * ct * d2
    return w11, w12, w22


def _congruence_sym2(w11, w12, w22, m11, m12, m22):
    """Components of W M W for symmetric W and M."""
    # t = W M
    t11 = w11 * m11 + w12 * m12
    t12 = w11 * m12 + w12 * m22
    t21 = w12 * m11 + w22 * m12
    t22 = w12 * m12 + w22 * m22
    # p = t W (symmetric up to rounding; symmetrize the off-diagonal)
    p11 = t11 * w11 + t12 * w12
    p22 = t21 * w12 + t22 * w22
    p12 = 0.5 * ((t11 * w12 + t12 * w22) + (t21 * w11 + t22 * w12))
    return p11, p12, p22


def _mat(a11, a12, a22) -> np.ndarray:
    return np.array([[a11, a12], [a12, a22]], dtype=float)


# ---------------------------------------------------------------------------
# single-voxel operations

def _check_kinks(theta: KineticParams, protocol: Protocol):
    t = sample_times(protocol)
    d = np.minimum(np.abs(t - theta.att), np.abs(t - theta.att - protocol.tau))
    if np.any(d < KINK_EPS):
        from .errors import KinkProximity
        raise KinkProximity(
            f"att={theta.att:g} collides with a sample-time kink")


def score_gaussian(x_m: np.ndarray, theta: KineticParams,
                   protocol: Protocol) -> np.ndarray:
    """Score of the Gaussian log-likelihood for one repetition, (2,)."""
    _check_kinks(theta, protocol)
    curve, jf, ja = batch_jacobian(np.array([theta.f]), np.array([theta.att]),
                                   protocol)
    r = np.asarray(x_m, dtype=float) - curve[0]
    s2 = protocol.sigma ** 2
    return np.array([np.dot(jf[0], r), np.dot(ja[0], r)]) / s2


def hessian_loglik_gaussian(x_m: np.ndarray, theta: KineticParams,
                            protocol: Protocol) -> np.ndarray:
    """Hessian of the Gaussian log-likelihood for one repetition, (2, 2)."""
    _check_kinks(theta, protocol)
    curve, jf, ja, hff, hfa, haa = batch_hessians(
        np.array([theta.f]), np.array([theta.att]), protocol)
    r = np.asarray(x_m, dtype=float) - curve[0]
    s2 = protocol.sigma ** 2
    h11 = (np.dot(r, hff[0]) - np.dot(jf[0], jf[0])) / s2
    h12 = (np.dot(r, hfa[0]) - np.dot(jf[0], ja[0])) / s2
    h22 = (np.dot(r, haa[0]) - np.dot(ja[0], ja[0])) / s2
    return _mat(h11, h12, h22)


def empirical_A(series: VoxelSeries, theta_hat: KineticParams,
                protocol: Protocol) -> np.ndarray:
    """Per-repetition average of log-likelihood Hessians at theta_hat.

    Raises NotNegativeDefinite when any eigenvalue is >= 0 (degenerate or
    boundary fit); such voxels are excluded downstream.
    """
    if series.n_reps < 2:
        raise ValueError("need M >= 2 repetitions")
    acc = np.zeros((2, 2))
    for m in range(series.n_reps):
        acc += hessian_loglik_gaussian(series.data[:, m], theta_hat, protocol)
    a_hat = acc / series.n_reps
    l1, _ = _eig_sym2(a_hat[0, 0], a_hat[0, 1], a_hat[1, 1])
    if l1 >= 0.0:
        raise NotNegativeDefinite(
            f"A_hat has a non-negative eigenvalue ({l1:g})")
    return a_hat


def empirical_B(series: VoxelSeries, theta_hat: KineticParams,
                protocol: Protocol) -> np.ndarray:
    """Per-repetition average of score outer products at theta_hat."""
    if series.n_reps < 2:
        raise ValueError("need M >= 2 repetitions")
    acc = np.zeros((2, 2))
    for m in range(series.n_reps):
        s = score_gaussian(series.data[:, m], theta_hat, protocol)
        acc += np.outer(s, s)
    return acc / series.n_reps


def crb_theoretical(theta: KineticParams, protocol: Protocol,
                    m: int) -> np.ndarray:
    """Classical bound sigma^2 (J'J)^-1 / m at theta."""
    if m < 1:
        raise ValueError("m must be >= 1")
    _check_kinks(theta, protocol)
    _, jfv, jav = batch_jacobian(np.array([theta.f]), np.array([theta.att]),
                                 protocol)
    jf, ja = jfv[0], jav[0]
    a11 = np.dot(jf, jf)
    a12 = np.dot(jf, ja)
    a22 = np.dot(ja, ja)
    l1, l2 = _eig_sym2(a11, a12, a22)
    if not np.isfinite(l2) or l2 <= 0.0 or l1 > _COND_LIMIT * l2:
        raise SingularInformation(
            f"J'J condition exceeds {_COND_LIMIT:g} at f={theta.f:g}, "
            f"att={theta.att:g}")
    i11, i12, i22 = _inv_sym2(a11, a12, a22)
    return protocol.sigma ** 2 / m * _mat(i11, i12, i22)


def mcrb_sandwich(a_hat: np.ndarray, b_hat: np.ndarray, m: int):
    """Sandwich bound A^-1 B A^-1 / m plus the matching -A^-1 / m.

    Returns (c_mcrb, c_crb_empirical).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    a11, a12, a22 = a_hat[0, 0], a_hat[0, 1], a_hat[1, 1]
    l1, _ = _eig_sym2(a11, a12, a22)
    if l1 >= 0.0:
        raise NotNegativeDefinite(
            f"A_hat has a non-negative eigenvalue ({l1:g})")
    i11, i12, i22 = _inv_sym2(a11, a12, a22)
    c11, c12, c22 = _congruence_sym2(i11, i12, i22, b_hat[0, 0], b_hat[0, 1],
                                     b_hat[1, 1])
    c_mcrb = _mat(c11, c12, c22) / m
    c_crb = _mat(-i11, -i12, -i22) / m
    return c_mcrb, c_crb


def congruence_metric(c_crb: np.ndarray, c_mcrb: np.ndarray):
    """Whiten the sandwich bound by the classical bound.

    Returns (p_hat, lambda_max, lambda_min, kappa) where
    p_hat = c_crb^-1/2 c_mcrb c_crb^-1/2 and kappa = lambda_max/lambda_min.
    """
    a11, a12, a22 = c_crb[0, 0], c_crb[0, 1], c_crb[1, 1]
    l1, l2 = _eig_sym2(a11, a12, a22)
    if not (np.isfinite(l2) and l2 > 0.0):
        raise NotPositiveDefinite(
            f"whitening reference not positive definite (eigs {l1:g}, {l2:g})")
    w11, w12, w22 = _invsqrt_sym2(a11, a12, a22)
    p11, p12, p22 = _congruence_sym2(w11, w12, w22, c_mcrb[0, 0],
                                     c_mcrb[0, 1], c_mcrb[1, 1])
    lam_max, lam_min = _eig_sym2(p11, p12, p22)
    if lam_max <= 0.0 or lam_min < _EIG_FLOOR * lam_max:
        raise DegenerateEigen(
            f"lambda_min {lam_min:g} below {_EIG_FLOOR:g} * lambda_max")
    return _mat(p11, p12, p22), float(lam_max), float(lam_min), \
        float(lam_max / lam_min)


def voxel_bounds_report(series: VoxelSeries, theta_hat: KineticParams,
                        protocol: Protocol) -> BoundsReport:
    """Full bound pipeline for one voxel at its fitted parameters.

    The empirical classical bound -A_hat^-1/M is the whitening reference;
    the theoretical CRB at theta_hat is reported alongside.
    """
    m = series.n_reps
    a_hat = empirical_A(series, theta_hat, protocol)
    b_hat = empirical_B(series, theta_hat, protocol)
    c_mcrb, c_crb = mcrb_sandwich(a_hat, b_hat, m)
    c_theo = crb_theoretical(theta_hat, protocol, m)
    p_hat, lam_max, lam_min, kappa = congruence_metric(c_crb, c_mcrb)
    return BoundsReport(a_hat=a_hat, b_hat=b_hat, c_crb_empirical=c_crb,
                        c_crb_theoretical=c_theo, c_mcrb=c_mcrb, p_hat=p_hat,
                        lambda_max=lam_max, lambda_min=lam_min, kappa=kappa,
                        m_used=m)


def crb_diag_batch(f, att, eligible, protocol: Protocol, m: int,
                   t1_map=None):
    """Theoretical CRB diagonal per voxel, (crb_f, crb_att) arrays.

    Ineligible or singular voxels carry NaN.
    """
    f = np.asarray(f, dtype=float)
    att = np.asarray(att, dtype=float)
    v = f.size
    out_f = np.full(v, np.nan)
    out_att = np.full(v, np.nan)
    rows = np.flatnonzero(eligible)
    if rows.size == 0:
        return out_f, out_att
    t1v = None if t1_map is None else np.asarray(t1_map, dtype=float)[rows]
    _, jf, ja = batch_jacobian(f[rows], att[rows], protocol, t1=t1v)
    g11 = np.sum(jf * jf, axis=1)
    g12 = np.sum(jf * ja, axis=1)
    g22 = np.sum(ja * ja, axis=1)
    l1, l2 = _eig_sym2(g11, g12, g22)
    ok = np.isfinite(l2) & (l2 > 0.0) & (l1 <= _COND_LIMIT * l2)
    det = g11 * g22 - g12 ** 2
    s2 = protocol.sigma ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out_f[rows] = np.where(ok, s2 / m * g22 / det, np.nan)
        out_att[rows] = np.where(ok, s2 / m * g11 / det, np.nan)
    return out_f, out_att


# ---------------------------------------------------------------------------
# batched map-level computation

@dataclass
class BoundsMaps:
    """Voxelwise eigenvalue maps plus per-voxel status codes.

    components (populated on request) maps names to (V, 3) arrays of
    symmetric-matrix triples (a11, a12, a22): a_hat, b_hat,
    c_crb_empirical, c_crb_theoretical, c_mcrb, p_hat.
    """

    lambda_max: np.ndarray
    lambda_min: np.ndarray
    kappa: np.ndarray
    crb_f: np.ndarray        # theoretical CRB diagonal, f
    crb_att: np.ndarray      # theoretical CRB diagonal, att
    status: np.ndarray
    m_used: int = 0
    components: dict | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.status == STATUS_OK


def batch_bounds(data: np.ndarray, f: np.ndarray, att: np.ndarray,
                 eligible: np.ndarray, protocol: Protocol,
                 t1_map=None, with_components: bool = False) -> BoundsMaps:
    """voxel_bounds_report over a (V, N, M) array, vectorized.

    eligible marks voxels with a usable fit (interior, converged, enough
    signal); everything else is recorded as skipped. Failures are recorded
    as status codes, never raised.
    """
    data = np.asarray(data, dtype=float)
    v, n, m = data.shape
    lam_max = np.full(v, np.nan)
    lam_min = np.full(v, np.nan)
    kappa = np.full(v, np.nan)
    crb_f = np.full(v, np.nan)
    crb_att = np.full(v, np.nan)
    status = np.full(v, STATUS_SKIPPED, dtype=np.uint8)
    comp = None
    if with_components:
        comp = {name: np.full((v, 3), np.nan) for name in
                ("a_hat", "b_hat", "c_crb_empirical", "c_crb_theoretical",
                 "c_mcrb", "p_hat")}

    def result():
        return BoundsMaps(lam_max, lam_min, kappa, crb_f, crb_att, status,
                          m_used=m, components=comp)

    rows = np.flatnonzero(eligible)
    if rows.size == 0:
        return result()

    fv = np.asarray(f, dtype=float)[rows]
    av = np.asarray(att, dtype=float)[rows]
    t1v = None if t1_map is None else np.asarray(t1_map, dtype=float)[rows]
    times = sample_times(protocol)
    s2 = protocol.sigma ** 2

    kink = np.min(np.minimum(np.abs(times[None, :] - av[:, None]),
                             np.abs(times[None, :] - protocol.tau - av[:, None])),
                  axis=1) < KINK_EPS
    status[rows[kink]] = STATUS_KINK
    keep = ~kink
    rows, fv, av = rows[keep], fv[keep], av[keep]
    if t1v is not None:
        t1v = t1v[keep]
    if rows.size == 0:
        return result()

    curve, jf, ja, hff, hfa, haa = batch_hessians(fv, av, protocol, t1=t1v)
    resid = data[rows] - curve[:, :, None]          # (V', N, M)
    rbar = resid.mean(axis=2)                       # (V', N)

    # A_hat = (mean_m sum_n r T - J'J) / sigma^2; linear in r, so the
    # repetition mean collapses onto rbar
    a11 = (np.sum(rbar * hff, axis=1) - np.sum(jf * jf, axis=1)) / s2
    a12 = (np.sum(rbar * hfa, axis=1) - np.sum(jf * ja, axis=1)) / s2
    a22 = (np.sum(rbar * haa, axis=1) - np.sum(ja * ja, axis=1)) / s2

    # per-repetition scores s_m = J' r_m / sigma^2
    sf = np.einsum("vn,vnm->vm", jf, resid) / s2
    sa = np.einsum("vn,vnm->vm", ja, resid) / s2
    b11 = np.mean(sf * sf, axis=1)
    b12 = np.mean(sf * sa, axis=1)
    b22 = np.mean(sa * sa, axis=1)

    al1, _ = _eig_sym2(a11, a12, a22)
    neg_def = al1 < 0.0
    status[rows[~neg_def]] = STATUS_NOT_NEG_DEF

    # theoretical CRB diagonal (independent of A_hat validity)
    g11 = np.sum(jf * jf, axis=1)
    g12 = np.sum(jf * ja, axis=1)
    g22 = np.sum(ja * ja, axis=1)
    gl1, gl2 = _eig_sym2(g11, g12, g22)
    info_ok = np.isfinite(gl2) & (gl2 > 0.0) & (gl1 <= _COND_LIMIT * gl2)
    det_g = g11 * g22 - g12 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        crb_f_v = np.where(info_ok, s2 / m * g22 / det_g, np.nan)
        crb_att_v = np.where(info_ok, s2 / m * g11 / det_g, np.nan)
    crb_f[rows] = crb_f_v
    crb_att[rows] = crb_att_v
    if comp is not None:
        comp["a_hat"][rows] = np.stack([a11, a12, a22], axis=1)
        comp["b_hat"][rows] = np.stack([b11, b12, b22], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            comp["c_crb_theoretical"][rows] = np.stack(
                [crb_f_v, np.where(info_ok, -s2 / m * g12 / det_g, np.nan),
                 crb_att_v], axis=1)

    ok = neg_def
    idx = rows[ok]
    if idx.size == 0:
        return result()

    i11, i12, i22 = _inv_sym2(a11[ok], a12[ok], a22[ok])
    m11, m12, m22 = _congruence_sym2(i11, i12, i22, b11[ok], b12[ok], b22[ok])
    c11, c12, c22 = -i11 / m, -i12 / m, -i22 / m    # empirical CRB
    m11, m12, m22 = m11 / m, m12 / m, m22 / m       # sandwich
    if comp is not None:
        comp["c_crb_empirical"][idx] = np.stack([c11, c12, c22], axis=1)
        comp["c_mcrb"][idx] = np.stack([m11, m12, m22], axis=1)

    cl1, cl2 = _eig_sym2(c11, c12, c22)
    spd = np.isfinite(cl2) & (cl2 > 0.0)
    status[idx[~spd]] = STATUS_NOT_SPD
    if not spd.any():
        return result()

    w11, w12, w22 = _invsqrt_sym2(np.where(spd, c11, 1.0),
                                  np.where(spd, c12, 0.0),
                                  np.where(spd, c22, 1.0))
    p11, p12, p22 = _congruence_sym2(w11, w12, w22, m11, m12, m22)
    if comp is not None:
        comp["p_hat"][idx[spd]] = np.stack(
            [p11[spd], p12[spd], p22[spd]], axis=1)
    l1, l2 = _eig_sym2(p11, p12, p22)
    degen = (l1 <= 0.0) | (l2 < _EIG_FLOOR * l1)
    status[idx[spd & degen]] = STATUS_DEGENERATE
    good = spd & ~degen
    gidx = idx[good]
    lam_max[gidx] = l1[good]
    lam_min[gidx] = l2[good]
    kappa[gidx] = l1[good] / l2[good]
    status[gidx] = STATUS_OK
    return result()
