"""Buxton single-compartment kinetic model for pCASL difference signals.

The perfusion-weighted signal is the convolution of a boxcar arterial bolus
(decaying with the blood T1 from its arrival time) with the tissue residue
and relaxation functions. For that input the convolution has a closed form,

    dM(t) = 2 * alpha * f_si * M0b * exp(-(t - att) * R1app) * phi(k, u),

with R1app = 1/T1 + f_si/lambda, k = R1app - 1/T1b, u = min(t - att, tau)
and phi(k, u) = (exp(k*u) - 1)/k, valid for t > att and zero before arrival.
Perfusion f is carried in mL/min/100g at every interface and converted to
the SI rate f_si = f/6000 1/s internally (tissue density 1 g/mL).

The closed form, its analytic first and second derivatives with respect to
(f, att), and a brute-force trapezoid quadrature of the defining integral
(used to validate the closed form) all live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import KinkProximity

# mL/min/100g -> 1/s assuming 1 g/mL tissue density
F_TO_SI = 1.0 / 6000.0

# sample times closer than this to att or att + tau count as kink collisions
KINK_EPS = 1e-6

PLD_IS_TIME = "pld_is_time"
PLD_PLUS_TAU = "pld_plus_tau"
TIME_CONVENTIONS = (PLD_IS_TIME, PLD_PLUS_TAU)


@dataclass(frozen=True)
class KineticParams:
    """Per-voxel physiological parameters.

    f: perfusion rate, mL/min/100g. att: arterial transit time, s.
    """

    f: float
    att: float

    def __post_init__(self):
        if not (math.isfinite(self.f) and self.f >= 0.0):
            raise ValueError(f"f must be finite and >= 0, got {self.f}")
        if not (math.isfinite(self.att) and self.att >= 0.0):
            raise ValueError(f"att must be finite and >= 0, got {self.att}")


@dataclass(frozen=True)
class Protocol:
    """Acquisition settings and fixed model constants.

    plds are the scanner post-labeling delays in seconds, strictly
    increasing. sigma is the per-channel noise standard deviation assumed
    by the fit (required; never estimated implicitly). time_convention
    selects whether a sample time equals the PLD or PLD + tau.
    """

    plds: tuple[float, ...]
    tau: float
    sigma: float
    alpha: float = 0.85
    m0b: float = 1.0
    lambda_bt: float = 0.9
    t1b: float = 1.65
    t1_tissue: float = 1.2
    time_convention: str = PLD_IS_TIME

    def __post_init__(self):
        object.__setattr__(self, "plds", tuple(float(p) for p in self.plds))
        plds = np.asarray(self.plds, dtype=float)
        if plds.size < 2:
            raise ValueError(f"need at least 2 PLDs, got {plds.size}")
        if not np.all(np.isfinite(plds)) or np.any(plds < 0.0):
            raise ValueError("plds must be finite and >= 0")
        if np.any(np.diff(plds) <= 0.0):
            raise ValueError("plds must be strictly increasing")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.lambda_bt > 0.0:
            raise ValueError(f"lambda_bt must be > 0, got {self.lambda_bt}")
        if not self.t1b > 0.0:
            raise ValueError(f"t1b must be > 0, got {self.t1b}")
        if not self.t1_tissue > 0.0:
            raise ValueError(f"t1_tissue must be > 0, got {self.t1_tissue}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.time_convention not in TIME_CONVENTIONS:
            raise ValueError(f"unknown time_convention {self.time_convention!r}")

    @property
    def n_plds(self) -> int:
        return len(self.plds)


def default_plds() -> tuple[float, ...]:
    """21-point PLD grid: 0 to 1 s in 0.1 s steps, then 1.2 to 3 s in 0.2 s."""
    early = [round(0.1 * i, 10) for i in range(11)]
    late = [round(1.2 + 0.2 * i, 10) for i in range(10)]
    return tuple(early + late)


def sample_times(protocol: Protocol) -> np.ndarray:
    """Model sample times t_i for the protocol, per its time convention."""
    t = np.asarray(protocol.plds, dtype=float)
    if protocol.time_convention == PLD_PLUS_TAU:
        t = t + protocol.tau
    return t


# ---------------------------------------------------------------------------
# phi(k, u) = (exp(k u) - 1)/k and its k-derivatives, with series fallbacks
# near k = 0 (the ratio forms lose digits to cancellation there).

def _phi(k, u):
    ku = k * u
    small = np.abs(ku) < 1e-6
    ksafe = np.where(small, 1.0, k)
    ratio = np.expm1(ku) / ksafe
    series = u * (1.0 + ku * (1.0 / 2.0 + ku * (1.0 / 6.0 + ku / 24.0)))
    return np.where(small, series, ratio)


def _phi_k(k, u):
    ku = k * u
    small = np.abs(ku) < 0.02
    ksafe = np.where(small, 1.0, k)
    eku = np.exp(ku)
    ratio = (u * eku - np.expm1(ku) / ksafe) / ksafe
    series = u * u * (0.5 + ku * (1.0 / 3.0 + ku * (1.0 / 8.0 + ku / 30.0)))
    return np.where(small, series, ratio)


def _phi_kk(k, u):
    ku = k * u
    small = np.abs(ku) < 0.02
    ksafe = np.where(small, 1.0, k)
    eku = np.exp(ku)
    ratio = (u * u * eku - 2.0 * (u * eku - np.expm1(ku) / ksafe) / ksafe) / ksafe
    series = u ** 3 * (1.0 / 3.0 + ku * (1.0 / 4.0 + ku * (1.0 / 10.0 + ku / 36.0)))
    return np.where(small, series, ratio)


def _model_fields(f, att, times, tau, alpha, m0b, lambda_bt, t1b, t1, order,
                  k_extra=0.0):
    """Closed-form curve and derivatives, vectorized over voxels.

    f, att: arrays of shape (V,), native units. t1 and k_extra: scalars or
    (V,) arrays. times: (N,). Returns (s, jf, ja, hff, hfa, haa), each
    (V, N); derivative slots are None below the requested order. k_extra
    adds an extra clearance rate to the residue function (used by the
    outflow data generator; zero reproduces the plain model bitwise).
    """
    f = np.asarray(f, dtype=float)[:, None]
    att = np.asarray(att, dtype=float)[:, None]
    t1 = np.asarray(t1, dtype=float)
    if t1.ndim == 1:
        t1 = t1[:, None]
    k_extra = np.asarray(k_extra, dtype=float)
    if k_extra.ndim == 1:
        k_extra = k_extra[:, None]
    times = np.asarray(times, dtype=float)[None, :]

    fsi = f * F_TO_SI
    lam = lambda_bt
    big_r = 1.0 / t1 + fsi / lam + k_extra
    k = big_r - 1.0 / t1b
    c0 = 2.0 * alpha * m0b

    w = times - att
    active = w > 0.0
    wa = np.where(active, w, 0.0)
    u = np.minimum(wa, tau)
    ua = np.where(w < tau, -1.0, 0.0)

    e_dec = np.exp(-wa * big_r)
    phi = _phi(k * np.ones_like(u), u)
    s = np.where(active, c0 * fsi * e_dec * phi, 0.0)

    jf = ja = hff = hfa = haa = None
    if order >= 1:
        eku = np.exp(k * u)
        phik = _phi_k(k * np.ones_like(u), u)
        gf = c0 * e_dec * (phi + (fsi / lam) * (phik - wa * phi))
        ga = c0 * fsi * e_dec * (big_r * phi + eku * ua)
        jf = np.where(active, gf * F_TO_SI, 0.0)
        ja = np.where(active, ga, 0.0)
    if order >= 2:
        phikk = _phi_kk(k * np.ones_like(u), u)
        psi = (phik - wa * phi) / lam
        gff = c0 * e_dec * (2.0 * psi + fsi * ((phikk - wa * phik) / lam ** 2
                                               - wa * psi / lam))
        gaa = c0 * fsi * e_dec * (big_r ** 2 * phi + 2.0 * big_r * eku * ua
                                  + k * eku * ua * ua)
        gfa = (c0 * e_dec * (1.0 - fsi * wa / lam) * (big_r * phi + eku * ua)
               + c0 * fsi * e_dec * (phi + big_r * phik + u * eku * ua) / lam)
        hff = np.where(active, gff * F_TO_SI * F_TO_SI, 0.0)
        hfa = np.where(active, gfa * F_TO_SI, 0.0)
        haa = np.where(active, gaa, 0.0)
    return s, jf, ja, hff, hfa, haa


def batch_curves(f, att, protocol: Protocol, t1=None, k_extra=0.0) -> np.ndarray:
    """Signal curves for arrays of (f, att), shape (V, N)."""
    t1v = protocol.t1_tissue if t1 is None else t1
    s, *_ = _model_fields(f, att, sample_times(protocol), protocol.tau,
                          protocol.alpha, protocol.m0b, protocol.lambda_bt,
                          protocol.t1b, t1v, order=0, k_extra=k_extra)
    return s


def batch_jacobian(f, att, protocol: Protocol, t1=None):
    """Curves plus d/df and d/datt columns; shapes (V, N) each."""
    t1v = protocol.t1_tissue if t1 is None else t1
    s, jf, ja, *_ = _model_fields(f, att, sample_times(protocol), protocol.tau,
                                  protocol.alpha, protocol.m0b,
                                  protocol.lambda_bt, protocol.t1b, t1v,
                                  order=1)
    return s, jf, ja


def batch_hessians(f, att, protocol: Protocol, t1=None):
    """Curves, jacobian columns and second-derivative components (V, N)."""
    t1v = protocol.t1_tissue if t1 is None else t1
    return _model_fields(f, att, sample_times(protocol), protocol.tau,
                         protocol.alpha, protocol.m0b, protocol.lambda_bt,
                         protocol.t1b, t1v, order=2)


# ---------------------------------------------------------------------------
# public single-voxel operations

def buxton_signal(params: KineticParams, protocol: Protocol, t: float) -> float:
    """Closed-form difference signal at time t (seconds)."""
    if t < 0.0:
        raise ValueError(f"t must be >= 0, got {t}")
    s, *_ = _model_fields(np.array([params.f]), np.array([params.att]),
                          np.array([t]), protocol.tau, protocol.alpha,
                          protocol.m0b, protocol.lambda_bt, protocol.t1b,
                          protocol.t1_tissue, order=0)
    return float(s[0, 0])


def buxton_signal_oracle(params: KineticParams, protocol: Protocol, t: float,
                         n_grid: int = 100_000) -> float:
    """Trapezoid quadrature of the defining convolution integral.

    Integrates c(s) * r(t-s) * m(t-s) over the uniform n_grid partition of
    [0, t], with the two bolus edges (where c jumps) inserted as exact
    breakpoints; the regions where c = 0 contribute nothing, so only the
    nodes inside the bolus support are kept. Converges O(n_grid**-2) to the
    closed form.
    """
    if n_grid < 1000:
        raise ValueError(f"n_grid must be >= 1000, got {n_grid}")
    if t < 0.0:
        raise ValueError(f"t must be >= 0, got {t}")
    fsi = params.f * F_TO_SI
    att = params.att
    if fsi == 0.0 or t <= att:
        return 0.0
    lo, hi = att, min(t, att + protocol.tau)
    nodes = np.linspace(0.0, t, n_grid + 1)
    inner = nodes[(nodes > lo) & (nodes < hi)]
    s = np.concatenate(([lo], inner, [hi]))
    big_r = 1.0 / protocol.t1_tissue + fsi / protocol.lambda_bt
    integrand = np.exp(-(s - att) / protocol.t1b) * np.exp(-(t - s) * big_r)
    integral = np.trapezoid(integrand, s)
    return float(2.0 * protocol.alpha * fsi * protocol.m0b * integral)


def signal_curve(params: KineticParams, protocol: Protocol) -> np.ndarray:
    """Closed-form signal at every protocol sample time, shape (N,)."""
    return batch_curves(np.array([params.f]), np.array([params.att]),
                        protocol)[0]


def _check_kinks(params: KineticParams, protocol: Protocol):
    t = sample_times(protocol)
    d = np.minimum(np.abs(t - params.att),
                   np.abs(t - params.att - protocol.tau))
    if np.any(d < KINK_EPS):
        i = int(np.argmin(d))
        raise KinkProximity(
            f"sample time {t[i]:g} s is within {KINK_EPS:g} s of a kink for "
            f"att={params.att:g}, tau={protocol.tau:g}")


def jacobian(params: KineticParams, protocol: Protocol) -> np.ndarray:
    """N x 2 matrix of [d dM/df, d dM/datt] at the sample times.

    f column in native units (mL/min/100g). Raises KinkProximity when a
    sample time sits within KINK_EPS of att or att + tau.
    """
    _check_kinks(params, protocol)
    _, jf, ja = batch_jacobian(np.array([params.f]), np.array([params.att]),
                               protocol)
    return np.stack([jf[0], ja[0]], axis=1)


def model_hessians(params: KineticParams, protocol: Protocol) -> np.ndarray:
    """N symmetric 2x2 second-derivative matrices of the curve, (N, 2, 2)."""
    _check_kinks(params, protocol)
    _, _, _, hff, hfa, haa = batch_hessians(np.array([params.f]),
                                            np.array([params.att]), protocol)
    out = np.empty((len(protocol.plds), 2, 2))
    out[:, 0, 0] = hff[0]
    out[:, 0, 1] = hfa[0]
    out[:, 1, 0] = hfa[0]
    out[:, 1, 1] = haa[0]
    return out
