"""Differential-privacy primitives for model updates.

Covers L2 clipping, the analytic Gaussian mechanism calibration, a moments
accountant for the subsampled Gaussian mechanism, a high-epsilon ("weak")
local randomizer and SNR telemetry. Every randomized function takes an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr

from .errors import ConfigError, InputError, NumericError

DEFAULT_DELTA = 1e-5
MAX_ORDER = 64


class Placement(str, enum.Enum):
    NONE = "none"
    LOCAL = "local"
    CENTRAL = "central"
    WEAK_LOCAL = "weak_local"


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InputError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise InputError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class MechanismConfig:
    """Clip norm and noise multiplier (sigma / clip_norm) for one placement."""

    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    placement: Placement = Placement.NONE

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        object.__setattr__(self, "placement", Placement(self.placement))

    @property
    def sigma(self) -> float:
        return self.noise_multiplier * self.clip_norm


@dataclass(frozen=True)
class AccountantConfig:
    population_size: int = 100_000_000
    cohort_size: int = 300
    max_rounds: int = 60
    target_delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.population_size < 1 or self.cohort_size < 1:
            raise ConfigError("population and cohort sizes must be positive")
        if self.cohort_size > self.population_size:
            raise ConfigError(
                f"cohort_size {self.cohort_size} exceeds population_size {self.population_size}"
            )
        if not 0 < self.target_delta < 1:
            raise ConfigError(f"target_delta must be in (0, 1), got {self.target_delta}")

    @property
    def sampling_rate(self) -> float:
        return self.cohort_size / self.population_size


# -- clipping and noise -------------------------------------------------------


def clip_update(update: np.ndarray, clip_norm: float) -> tuple[np.ndarray, float]:
    """Scale ``update`` onto the L2 ball of radius ``clip_norm``.

    Returns the clipped vector and the pre-clip norm. Vectors already inside
    the ball are returned unchanged (as a copy).
    """
    if not clip_norm > 0:
        raise InputError(f"clip_norm must be > 0, got {clip_norm}")
    update = np.asarray(update, dtype=np.float64)
    if not np.all(np.isfinite(update)):
        raise InputError("update contains non-finite entries")
    norm = float(np.linalg.norm(update))
    if norm <= clip_norm:
        return update.copy(), norm
    scale = clip_norm / norm
    out = update * scale
    # rounding can leave the result a few ulps outside the ball; shrink until it
    # is inside so that clipping twice is a no-op
    while np.linalg.norm(out) > clip_norm:
        scale = np.nextafter(scale, 0.0)
        out = update * scale
    return out, norm


def add_gaussian_noise(
    v: np.ndarray, sigma: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(v + n, n)`` with ``n ~ N(0, sigma^2 I)``."""
    if sigma < 0:
        raise InputError(f"sigma must be >= 0, got {sigma}")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0:
        return v.copy(), np.zeros_like(v)
    noise = sigma * rng.standard_normal(v.shape)
    return v + noise, noise


def snr(update: np.ndarray, noise: np.ndarray) -> float:
    """``||update|| / ||noise||``; ``inf`` when no noise was added."""
    update = np.asarray(update)
    noise = np.asarray(noise)
    if update.shape != noise.shape:
        raise InputError(f"shape mismatch: {update.shape} vs {noise.shape}")
    nn = float(np.linalg.norm(noise))
    if nn == 0.0:
        return math.inf
    return float(np.linalg.norm(update)) / nn


# -- analytic Gaussian mechanism ----------------------------------------------


def gaussian_delta(sigma: float, epsilon: float, sensitivity: float = 1.0) -> float:
    """Exact delta of the Gaussian mechanism with noise ``sigma`` at ``epsilon``.

    ``Phi(D/(2s) - e s/D) - exp(e) Phi(-D/(2s) - e s/D)``, evaluated through
    log-CDFs so the second term does not overflow for large epsilon.
    """
    a = sensitivity / (2.0 * sigma)
    b = epsilon * sigma / sensitivity
    return float(np.exp(log_ndtr(a - b)) - np.exp(epsilon + log_ndtr(-a - b)))


def gaussian_sigma(pp: PrivacyParams, sensitivity: float, rtol: float = 1e-10) -> float:
    """Smallest noise scale for which the Gaussian mechanism is (eps, delta)-DP."""
    if not sensitivity > 0:
        raise InputError(f"sensitivity must be > 0, got {sensitivity}")
    if not 0 < pp.delta < 1:
        raise InputError(f"delta must be in (0, 1), got {pp.delta}")
    # Work with unit sensitivity; sigma scales linearly.
    lo, hi = 1e-3, 1.0
    while gaussian_delta(hi, pp.epsilon) > pp.delta:
        lo, hi = hi, hi * 2
        if hi > 1e12:
            raise NumericError("gaussian_sigma: no bracket found")
    while gaussian_delta(lo, pp.epsilon) <= pp.delta:
        hi, lo = lo, lo / 2
        if lo < 1e-300:
            raise NumericError("gaussian_sigma: no lower bracket found")
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if gaussian_delta(mid, pp.epsilon) <= pp.delta:
            hi = mid
        else:
            lo = mid
    return hi * sensitivity


# -- moments accountant -------------------------------------------------------


def _log_moment(noise_multiplier: float, q: float, order: int) -> float:
    """Log moment of the privacy loss of one subsampled Gaussian step.

    With mu0 = N(0, s^2), mu1 = N(1, s^2) and mu = (1-q) mu0 + q mu1 the two
    candidate moments are ``E_mu0[(mu0/mu)^l]`` and ``E_mu[(mu/mu0)^l]``; the
    log of the larger is returned. Both are written as ``E_mu0[r^k]`` with
    ``r = mu/mu0`` (k = -l and k = l + 1) and integrated as ``E_mu0[r^k - 1]``
    so tiny moments at small q keep full precision.
    """
    s = noise_multiplier
    lam = order
    results = []
    for k in (-lam, lam + 1):
        results.append(_log_expect_r_pow(s, q, k))
    return max(results)


def _log_r(z, s, q):
    # log(1 - q + q exp((2z - 1) / (2 s^2))) computed stably
    t = (2.0 * z - 1.0) / (2.0 * s * s)
    if q == 1.0:
        return t
    return np.logaddexp(math.log1p(-q), math.log(q) + t)


def _quad(f, lo, hi, points):
    # quad reports roundoff warnings near 1e-10 relative; accuracy is checked in tests
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, lo, hi, points=points, limit=500, epsabs=0.0, epsrel=1e-10)
    return val


def _log_expect_r_pow(s: float, q: float, k: int) -> float:
    # for k > 0 the r^k factor pulls mass towards z ~ k
    center = float(max(k, 0))
    lo = -40.0 * s - 1.0
    hi = center + 40.0 * s + 1.0
    points = sorted({0.0, 0.5, center})
    points = [p for p in points if lo < p < hi]
    log_norm = -0.5 * math.log(2.0 * math.pi) - math.log(s)

    def log_f(z):
        return log_norm - z * z / (2.0 * s * s) + k * _log_r(z, s, q)

    # locate the integrand maximum on a grid to choose a numerically safe path
    grid = np.linspace(lo, hi, 4001)
    lf = log_f(grid)
    m = float(np.max(lf))
    if not np.isfinite(m):
        raise NumericError(f"non-finite moment integrand at order {k}")
    zmax = float(grid[np.argmax(lf)])
    points = sorted(set(points) | {zmax})

    if m < 5.0:
        # E[r^k] - 1 = E[expm1(k log r)], no cancellation when moments are ~1
        def g(z):
            log_dens = log_norm - z * z / (2.0 * s * s)
            u = k * float(_log_r(z, s, q))
            if u > 50.0:
                return math.exp(log_dens + u) - math.exp(log_dens)
            return math.exp(log_dens) * math.expm1(u)

        val = _quad(g, lo, hi, points)
        if not np.isfinite(val) or val <= -1.0:
            raise NumericError(f"moment integration failed at order {k}")
        return math.log1p(val)

    def g_shift(z):
        return math.exp(float(log_f(z)) - m)

    val = _quad(g_shift, lo, hi, points)
    if not np.isfinite(val) or val <= 0:
        raise NumericError(f"moment integration failed at order {k}")
    return m + math.log(val)


@lru_cache(maxsize=4096)
def log_moments(noise_multiplier: float, q: float) -> tuple[float, ...]:
    """Per-step log moments alpha(l) for l = 1..64."""
    out = []
    for lam in range(1, MAX_ORDER + 1):
        try:
            a = _log_moment(noise_multiplier, q, lam)
        except (NumericError, OverflowError) as exc:
            raise NumericError(f"log moment failed at lambda={lam}: {exc}") from exc
        if not math.isfinite(a):
            raise NumericError(f"non-finite log moment at lambda={lam}")
        out.append(max(a, 0.0))
    return tuple(out)


def accountant_epsilon(noise_multiplier: float, q: float, rounds: int, delta: float) -> float:
    """Epsilon after ``rounds`` compositions of the subsampled Gaussian mechanism.

    ``min_l (rounds * alpha(l) + log(1/delta)) / l`` over integer orders 1..64.
    """
    if not 0 < q <= 1:
        raise InputError(f"sampling rate must be in (0, 1], got {q}")
    if not noise_multiplier > 0:
        raise InputError(f"noise_multiplier must be > 0, got {noise_multiplier}")
    if rounds < 0:
        raise InputError(f"rounds must be >= 0, got {rounds}")
    if not 0 < delta < 1:
        raise InputError(f"delta must be in (0, 1), got {delta}")
    if rounds == 0:
        return 0.0
    alphas = log_moments(float(noise_multiplier), float(q))
    log_inv_delta = math.log(1.0 / delta)
    return min((rounds * a + log_inv_delta) / lam for lam, a in enumerate(alphas, start=1))


def accountant_sigma(target: PrivacyParams, q: float, rounds: int, rtol: float = 1e-6) -> float:
    """Smallest noise multiplier whose accountant epsilon is within ``target``."""
    if rounds == 0:
        return 0.0

    def ok(z):
        return accountant_epsilon(z, q, rounds, target.delta) <= target.epsilon

    lo, hi = 0.25, 1.0
    while not ok(hi):
        lo, hi = hi, hi * 2.0
        if hi > 1e6:
            raise NumericError("accountant_sigma: bracket exhausted above")
    while ok(lo):
        hi, lo = lo, lo / 2.0
        if lo < 1e-3:
            raise NumericError("accountant_sigma: bracket exhausted below")
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


# -- local randomizers --------------------------------------------------------


def local_gaussian(
    update: np.ndarray,
    pp: PrivacyParams,
    clip_norm: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip then apply a Gaussian mechanism calibrated to ``pp``.

    Returns ``(noised, clipped, noise)``.
    """
    clipped, _ = clip_update(update, clip_norm)
    sigma = gaussian_sigma(pp, clip_norm)
    noised, noise = add_gaussian_noise(clipped, sigma, rng)
    return noised, clipped, noise


def weak_local_randomizer(
    update: np.ndarray,
    local_epsilon: float,
    clip_norm: float,
    rng: np.random.Generator,
    local_delta: float = DEFAULT_DELTA,
) -> np.ndarray:
    """High-epsilon local Gaussian randomizer, used together with central DP."""
    if not local_epsilon > 0:
        raise InputError(f"local_epsilon must be > 0, got {local_epsilon}")
    if math.isinf(local_epsilon):
        return clip_update(update, clip_norm)[0]
    noised, _, _ = local_gaussian(update, PrivacyParams(local_epsilon, local_delta), clip_norm, rng)
    return noised
