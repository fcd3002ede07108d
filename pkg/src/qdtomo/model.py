"""Click-probability model of a threshold detector probed with coherent light.

A detector is described by an external efficiency ``eta`` and internal
efficiencies ``p_1 .. p_nmax``; ``p_0 = 0`` and ``p_i = 1`` for ``i > nmax``.
With ``mu = eta * <n>`` the click probability is

    P(mu) = 1 - exp(-mu) * sum_{i=0}^{nmax} (1 - p_i) mu^i / i!

All array functions broadcast ``mu`` against ``p[..., 0]`` so that a whole
ensemble of walkers can be evaluated against a whole dataset in one call.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import brentq
from scipy.special import gammainc, gammaln

from .errors import NonInvertibleModelError, OutOfDomainError

# Above this the linear recurrence would start from exp(-mu) == 0.
_LINEAR_MU_LIMIT = 700.0
_MAX_NEWTON_ITER = 200
_MAX_LOG_STEP = 3.0


@dataclass(frozen=True)
class CoherentInput:
    """Coherent probe state with ``mean_photons`` photons per pulse."""

    mean_photons: float

    def __post_init__(self):
        if not self.mean_photons >= 0:
            raise ValueError(f"mean_photons must be >= 0, got {self.mean_photons}")


@dataclass(frozen=True)
class DetectorModel:
    """External efficiency ``eta`` and internal efficiencies ``p = (p_1, ..)``.

    ``p`` may be empty, which is the ideal threshold detector (every absorbed
    photon clicks).
    """

    eta: float
    p: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        for i, v in enumerate(self.p, start=1):
            if not 0 <= v <= 1:
                raise ValueError(f"p_{i} must lie in [0, 1], got {v}")

    @property
    def n_max(self) -> int:
        return len(self.p)

    @property
    def n_params(self) -> int:
        return 1 + len(self.p)

    @property
    def is_monotone(self) -> bool:
        return all(a <= b for a, b in zip(self.p, self.p[1:]))

    @property
    def p1(self) -> float:
        return self.p[0] if self.p else 1.0

    @classmethod
    def ideal(cls, eta: float) -> "DetectorModel":
        return cls(eta, ())

    @classmethod
    def from_params(cls, theta: Sequence[float]) -> "DetectorModel":
        """Build from a sampler vector ``[log10(eta), p_1, ..]``."""
        return cls(float(10.0 ** theta[0]), tuple(theta[1:]))

    def to_params(self) -> NDArray[np.float64]:
        return np.array([np.log10(self.eta), *self.p])


PhotonInput = Union[ArrayLike, CoherentInput]


def _photons(x: PhotonInput) -> NDArray[np.float64]:
    if isinstance(x, CoherentInput):
        return np.asarray(x.mean_photons, dtype=float)
    return np.asarray(x, dtype=float)


def poisson_terms(mu: ArrayLike, n: int) -> NDArray[np.float64]:
    """``exp(-mu) mu^i / i!`` for ``i = 0..n``, stacked on a new last axis."""
    mu = np.asarray(mu, dtype=float)
    out = np.empty(mu.shape + (n + 1,))
    linear = mu <= _LINEAR_MU_LIMIT
    # entries past the limit are overwritten below; zero them so they stay finite
    scale = np.where(linear, mu, 0.0)
    term = np.exp(-scale)
    out[..., 0] = term
    for i in range(1, n + 1):
        term = term * scale / i
        out[..., i] = term
    if not np.all(linear):
        safe = np.where(linear, 1.0, mu)[..., None]
        i = np.arange(n + 1)
        logt = -safe + i * np.log(safe) - gammaln(i + 1)
        out = np.where(linear[..., None], out, np.exp(logt))
    return out


def click_probability_mu(mu: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    """P_click as a function of the effective photon number ``mu``.

    Evaluated as ``sum_{i=1}^{n} p_i T_i + Pr[Poisson(mu) > n]`` which equals
    the no-click complement form but keeps full relative precision at low flux.
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    terms = poisson_terms(mu, n)
    return np.sum(p * terms[..., 1:], axis=-1) + gammainc(n + 1, np.asarray(mu, dtype=float))


def no_click_probability_mu(mu: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    terms = poisson_terms(mu, n)
    q = np.concatenate([np.ones(p.shape[:-1] + (1,)), 1.0 - p], axis=-1)
    return np.sum(q * terms, axis=-1)


def click_probability_slope_mu(mu: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    """dP/dmu = exp(-mu) * sum_{i=0}^{n} (p_{i+1} - p_i) mu^i / i!."""
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    terms = poisson_terms(mu, n)
    lead = p.shape[:-1] + (1,)
    full = np.concatenate([np.zeros(lead), p, np.ones(lead)], axis=-1)
    return np.sum(np.diff(full, axis=-1) * terms, axis=-1)


def _residual(mu, target, p):
    # Low targets compare click probabilities, high targets compare no-click
    # probabilities, so neither side loses relative precision.
    low = target <= 0.5
    return np.where(
        low,
        click_probability_mu(mu, p) - target,
        (1.0 - target) - no_click_probability_mu(mu, p),
    )


def _curve_terms(mu, p):
    """P, Q = 1 - P and dP/dmu from a single pass over the Poisson terms."""
    n = p.shape[-1]
    terms = poisson_terms(mu, n)
    lead = p.shape[:-1] + (1,)
    full = np.concatenate([np.zeros(lead), p, np.ones(lead)], axis=-1)
    click = np.sum(p * terms[..., 1:], axis=-1) + gammainc(n + 1, mu)
    no_click = np.sum((1.0 - full[..., :-1]) * terms, axis=-1)
    slope = np.sum(np.diff(full, axis=-1) * terms, axis=-1)
    return click, no_click, slope


def solve_mu(target: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    """Vectorized inverse of :func:`click_probability_mu`.

    Safeguarded Newton iteration in ``log(mu)`` on ``log(P / target)`` for
    low targets and ``log((1 - target) / Q)`` for high ones; both are close to
    linear, so a handful of iterations reach full precision. ``p`` must be
    non-decreasing along its last axis and ``0 <= target < 1``; callers validate.
    """
    p = np.asarray(p, dtype=float)
    target = np.asarray(target, dtype=float)
    shape = np.broadcast_shapes(target.shape, p.shape[:-1])
    target = np.broadcast_to(target, shape)
    p = np.broadcast_to(p, shape + p.shape[-1:])
    zero = target <= 0.0
    tgt = np.where(zero, 0.5, target)
    low = tgt <= 0.5
    log_tgt = np.where(low, np.log(tgt), np.log1p(-tgt))

    p1 = p[..., 0] if p.shape[-1] else np.ones(shape)
    with np.errstate(over="ignore"):
        guess = np.where(low, tgt / np.where(p1 > 0, p1, 1.0), -np.log1p(-tgt))
    guess = np.minimum(guess, 50.0)
    u = np.log(guess)
    lo = np.full(shape, -np.inf)
    hi = np.full(shape, np.inf)
    done = zero.copy()
    eps = np.finfo(float).eps
    for _ in range(_MAX_NEWTON_ITER):
        mu = np.exp(u)
        click, no_click, slope = _curve_terms(mu, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(low, np.log(click) - log_tgt, log_tgt - np.log(no_click))
            dg = mu * slope / np.where(low, click, no_click)
            step = u - np.clip(g / dg, -_MAX_LOG_STEP, _MAX_LOG_STEP)
        lo = np.where(g < 0, u, lo)
        hi = np.where(g > 0, u, hi)
        bounded = np.isfinite(lo) & np.isfinite(hi)
        mid = 0.5 * (np.where(bounded, lo, 0.0) + np.where(bounded, hi, 0.0))
        fallback = np.where(bounded, mid, np.where(g < 0, u + 1.0, u - 1.0))
        tol = 4 * eps * np.maximum(1.0, np.abs(u))
        settled = np.isfinite(step) & (np.abs(step - u) <= tol)
        ok = np.isfinite(step) & (dg > 0) & (step > lo) & (step < hi)
        u_new = np.where(settled | ok, step, fallback)
        converged = (g == 0) | settled | (bounded & (hi - lo <= tol))
        u = np.where(done | (g == 0), u, u_new)
        done |= converged
        if np.all(done):
            break
    return np.where(zero, 0.0, np.exp(u))


def effective_photon_number(model: DetectorModel, mean_photons: PhotonInput):
    return model.eta * _photons(mean_photons)


def _p_at(model: DetectorModel, i: int) -> float:
    if i == 0:
        return 0.0
    if i > model.n_max:
        return 1.0
    return model.p[i - 1]


def i_photon_click_probability(model: DetectorModel, mean_photons: PhotonInput, i: int):
    """Probability that exactly ``i`` photons are absorbed and produce a click."""
    if i < 0:
        raise ValueError("photon number must be non-negative")
    mu = effective_photon_number(model, mean_photons)
    return _p_at(model, i) * poisson_terms(mu, i)[..., i]


def click_probability(model: DetectorModel, mean_photons: PhotonInput):
    mu = effective_photon_number(model, mean_photons)
    out = click_probability_mu(mu, np.asarray(model.p, dtype=float))
    return float(out) if out.ndim == 0 else out


def inverse_click_probability(model: DetectorModel, target: float) -> float:
    """Mean photon number at which the model clicks with probability ``target``.

    Uses Brent's method on a bracket expanded geometrically from the low-flux
    linearisation ``target / (eta * p_1)``.
    """
    target = float(target)
    if not 0.0 <= target < 1.0:
        raise OutOfDomainError(f"target click probability {target} is outside [0, 1)")
    if not model.is_monotone:
        raise NonInvertibleModelError(f"internal efficiencies {model.p} are not non-decreasing")
    if target == 0.0:
        return 0.0
    p = np.asarray(model.p, dtype=float)

    def f(mu):
        return float(_residual(np.asarray(mu), target, p))

    start = min(target / model.p1, 50.0) if model.p1 > 0 else 1.0
    hi = start
    while f(hi) < 0:
        hi *= 2.0
    lo = start
    while f(lo) > 0:
        lo *= 0.5
    if lo == hi:
        return hi / model.eta
    mu = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return mu / model.eta


def low_flux_slope(model: DetectorModel) -> float:
    """dP_click/d<n> at zero flux, which is ``eta * p_1``."""
    return model.eta * model.p1
