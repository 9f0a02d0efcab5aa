"""Ray sample placement: truncated-normal depth-prior sampling and uniform
stratified sampling, plus the epoch gate that switches between them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import ndtr

Strategy = Literal["uniform", "tdbs", "coarse_to_fine"]

_SQRT2PI = np.sqrt(2.0 * np.pi)


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class TruncNormParams:
    """Normal(mu, sigma) restricted to [a, b]."""

    mu: float
    sigma: float
    a: float
    b: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise SamplingError(f"sigma must be positive, got {self.sigma}")
        if not self.a < self.b:
            raise SamplingError(f"need a < b, got [{self.a}, {self.b}]")


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 128
    strategy: Strategy = "coarse_to_fine"
    T_s: int = 1000
    near: float = 0.001
    far: float = 1.0
    stratified_jitter: bool = True
    rng_seed: int = 0
    sigma_bar: float = 0.1
    # truncation bounds for the depth prior; default to [near, far]
    tdbs_a: float | None = None
    tdbs_b: float | None = None
    # "stratified" u_k = (k + jitter)/n, or "iid" uniform draws
    u_mode: Literal["stratified", "iid"] = "stratified"

    def __post_init__(self):
        if self.n_samples < 2:
            raise SamplingError("n_samples must be >= 2")
        if not self.near < self.far:
            raise SamplingError(f"need near < far, got [{self.near}, {self.far}]")
        if self.strategy not in ("uniform", "tdbs", "coarse_to_fine"):
            raise SamplingError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "coarse_to_fine" and self.T_s < 1:
            raise SamplingError("T_s must be >= 1 under coarse_to_fine")
        if self.u_mode not in ("stratified", "iid"):
            raise SamplingError(f"unknown u_mode {self.u_mode!r}")

    @property
    def bounds(self) -> tuple[float, float]:
        a = self.near if self.tdbs_a is None else self.tdbs_a
        b = self.far if self.tdbs_b is None else self.tdbs_b
        return a, b

    @property
    def delta_cap(self) -> float:
        return (self.far - self.near) / self.n_samples


@dataclass
class RaySampleSet:
    ts: np.ndarray
    deltas: np.ndarray


def norm_pdf(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT2PI


# Acklam's rational approximation coefficients
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549671010229583e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _horner(coeffs, x):
    acc = np.zeros_like(x)
    for c in coeffs:
        acc = acc * x + c
    return acc


def norm_ppf(p):
    """Standard normal quantile.

    Acklam's rational approximation followed by one Halley step (Newton with
    the second-order correction) on the normal CDF; the tail branch starts
    near 1e-5 relative error, so a plain Newton step is not enough for 1e-10
    round trips.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise SamplingError("norm_ppf needs 0 < p < 1")
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1 - _P_LOW
    mid = ~(lo | hi)
    if np.any(lo):
        q = np.sqrt(-2 * np.log(p[lo]))
        x[lo] = _horner(_C, q) / (_horner(_D, q) * q + 1)
    if np.any(hi):
        q = np.sqrt(-2 * np.log1p(-p[hi]))
        x[hi] = -_horner(_C, q) / (_horner(_D, q) * q + 1)
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        x[mid] = _horner(_A, r) * q / (_horner(_B, r) * r + 1)
    # in the upper half work with the survival function
    upper = p > 0.5
    err = np.where(upper, (1 - p) - ndtr(-x), ndtr(x) - p)
    dens = norm_pdf(x)
    step = np.divide(err, dens, out=np.zeros_like(err), where=dens > 1e-300)
    x = x - step / (1 + 0.5 * x * step)
    return x


def _standardized(mu, sigma, a, b):
    alpha = (a - mu) / sigma
    beta = (b - mu) / sigma
    # when the whole interval sits above the mean, use survival functions
    flip = alpha > 0
    lo_mass = np.where(flip, ndtr(-beta), ndtr(alpha))
    hi_mass = np.where(flip, ndtr(-alpha), ndtr(beta))
    mass = hi_mass - lo_mass
    if np.any(mass < 1e-300):
        raise SamplingError(
            "truncated normal has no mass in [a, b]; widen the bounds")
    return alpha, beta, flip, lo_mass, mass


def truncnorm_pdf(p: TruncNormParams, x):
    x = np.asarray(x, dtype=np.float64)
    _, _, _, _, mass = _standardized(p.mu, p.sigma, p.a, p.b)
    inside = (x > p.a) & (x < p.b)
    return np.where(inside, norm_pdf((x - p.mu) / p.sigma) / (p.sigma * mass), 0.0)


def truncnorm_cdf(p: TruncNormParams, x):
    x = np.asarray(x, dtype=np.float64)
    alpha, beta, flip, lo_mass, mass = _standardized(p.mu, p.sigma, p.a, p.b)
    xi = (np.clip(x, p.a, p.b) - p.mu) / p.sigma
    if flip:
        val = (ndtr(-alpha) - ndtr(-xi)) / mass
    else:
        val = (ndtr(xi) - ndtr(alpha)) / mass
    val = np.clip(val, 0.0, 1.0)
    return np.where(x <= p.a, 0.0, np.where(x >= p.b, 1.0, val))


def _inverse_cdf(mu, sigma, a, b, u):
    alpha, beta, flip, lo_mass, mass = _standardized(mu, sigma, a, b)
    # flipped: quantile of the reflected distribution, then reflect back
    q = np.where(flip, ndtr(-alpha) - u * mass, lo_mass + u * mass)
    q = np.clip(q, np.finfo(float).tiny, 1 - np.finfo(float).eps / 2)
    z = norm_ppf(q)
    x = mu + sigma * np.where(flip, -z, z)
    return np.clip(x, a, b)


def truncnorm_inverse_cdf(p: TruncNormParams, u):
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise SamplingError("inverse cdf needs 0 < u < 1")
    return _inverse_cdf(p.mu, p.sigma, p.a, p.b, u)


def truncnorm_moments(p: TruncNormParams) -> tuple[float, float]:
    """Analytic mean and variance of the truncated normal."""
    alpha = (p.a - p.mu) / p.sigma
    beta = (p.b - p.mu) / p.sigma
    z = ndtr(beta) - ndtr(alpha)
    pa, pb = norm_pdf(alpha), norm_pdf(beta)
    mean = p.mu + p.sigma * (pa - pb) / z
    var = p.sigma ** 2 * (1 + (alpha * pa - beta * pb) / z - ((pa - pb) / z) ** 2)
    return float(mean), float(var)


def _u_values(n_rays: int, cfg: SamplingConfig, rng) -> np.ndarray:
    n = cfg.n_samples
    if cfg.u_mode == "iid":
        u = np.sort(rng.random((n_rays, n)), axis=1)
        return u
    k = np.arange(n, dtype=np.float64)
    if cfg.stratified_jitter:
        jitter = rng.random((n_rays, n))
    else:
        jitter = np.full((n_rays, n), 0.5)
    return (k + jitter) / n


def tdbs_ts(prior_depth, cfg: SamplingConfig, sigma_bar: float | None, rng) -> np.ndarray:
    """Batched truncated-normal depths, one row per ray, sorted."""
    prior = np.asarray(prior_depth, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(prior)):
        raise SamplingError("prior depth must be finite")
    sigma = cfg.sigma_bar if sigma_bar is None else sigma_bar
    a, b = cfg.bounds
    TruncNormParams(0.5 * (a + b), sigma, a, b)
    eps = 1e-4 * (b - a)
    mu = np.clip(prior, a + eps, b - eps)[:, None]
    u = _u_values(len(prior), cfg, rng)
    # iid draws are open-interval only away from 0
    u = np.clip(u, 1e-12, 1 - 1e-12)
    ts = _inverse_cdf(mu, sigma, a, b, u)
    return np.sort(ts, axis=1)


def uniform_ts(n_rays: int, cfg: SamplingConfig, rng) -> np.ndarray:
    u = _u_values(n_rays, cfg, rng)
    return cfg.near + (cfg.far - cfg.near) * u


def _deltas(ts: np.ndarray, cap: float) -> np.ndarray:
    d = np.empty_like(ts)
    d[..., :-1] = np.diff(ts, axis=-1)
    d[..., -1] = cap
    return d


def sample_tdbs(prior_depth: float, cfg: SamplingConfig, sigma_bar: float | None = None,
                rng=None) -> RaySampleSet:
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    ts = tdbs_ts(np.array([prior_depth]), cfg, sigma_bar, rng)[0]
    return RaySampleSet(ts, _deltas(ts, cfg.delta_cap))


def sample_uniform(cfg: SamplingConfig, rng=None) -> RaySampleSet:
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    ts = uniform_ts(1, cfg, rng)[0]
    return RaySampleSet(ts, _deltas(ts, cfg.delta_cap))


def select_strategy(epoch: int, cfg: SamplingConfig) -> Literal["tdbs", "uniform"]:
    """Sampling strategy for a given epoch.

    ``coarse_to_fine`` uses truncated-normal sampling while ``epoch < T_s``
    and uniform sampling from ``T_s`` on.
    """
    if epoch < 0:
        raise SamplingError("epoch must be >= 0")
    if cfg.strategy == "uniform":
        return "uniform"
    if cfg.strategy == "tdbs":
        return "tdbs"
    return "tdbs" if epoch < cfg.T_s else "uniform"
