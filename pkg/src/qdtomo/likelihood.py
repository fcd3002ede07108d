"""Orthogonal-distance chi-square, log likelihood and model-scoring helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateFitError
from .model import DetectorModel, click_probability_mu, solve_mu

DEFAULT_POWER_METER_ERROR = 0.03


@dataclass(frozen=True)
class ExperimentMeta:
    wavelength: float = 850e-9
    rep_rate: float = 5e6
    temperature: Optional[float] = None
    bias_current: Optional[float] = None
    power_meter_relative_error: float = DEFAULT_POWER_METER_ERROR
    splitter_calibration: float = 1.0

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if not self.rep_rate > 0:
            raise ValueError("rep_rate must be positive")
        if not self.power_meter_relative_error >= 0:
            raise ValueError("power_meter_relative_error must be non-negative")
        if not self.splitter_calibration > 0:
            raise ValueError("splitter_calibration must be positive")


@dataclass(frozen=True)
class DataPoint:
    """One power setting: photon number and click probability with errors."""

    mean_photons: float
    sigma_mean_photons: float
    p_click: float
    sigma_p_click: float
    clicks: Optional[int] = None
    trials: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.p_click <= 1:
            raise ValueError(f"p_click must lie in [0, 1], got {self.p_click}")
        if not self.sigma_p_click > 0:
            raise ValueError("sigma_p_click must be positive")
        if not self.sigma_mean_photons > 0:
            raise ValueError("sigma_mean_photons must be positive")
        if self.trials is not None and self.trials < 1:
            raise ValueError("trials must be positive")
        if self.clicks is not None:
            if self.clicks < 0 or (self.trials is not None and self.clicks > self.trials):
                raise ValueError("clicks must lie in [0, trials]")


@dataclass(frozen=True)
class Dataset:
    points: tuple[DataPoint, ...]
    meta: ExperimentMeta = field(default_factory=ExperimentMeta)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise ValueError("dataset has no points")
        n = self.mean_photons
        if np.any(n <= 0):
            raise ValueError("mean_photons must be strictly positive")
        if len(n) > 1 and np.all(n == n[0]):
            raise ValueError("mean_photons values are all equal")

    def __len__(self):
        return len(self.points)

    @cached_property
    def mean_photons(self) -> NDArray[np.float64]:
        return np.array([pt.mean_photons for pt in self.points])

    @cached_property
    def sigma_mean_photons(self) -> NDArray[np.float64]:
        return np.array([pt.sigma_mean_photons for pt in self.points])

    @cached_property
    def p_click(self) -> NDArray[np.float64]:
        return np.array([pt.p_click for pt in self.points])

    @cached_property
    def sigma_p_click(self) -> NDArray[np.float64]:
        return np.array([pt.sigma_p_click for pt in self.points])

    def sorted(self) -> "Dataset":
        return Dataset(tuple(sorted(self.points, key=lambda pt: pt.mean_photons)), self.meta)


@dataclass(frozen=True)
class PriorSpec:
    """Flat prior on ``log10(eta)`` and on each ``p_i`` in [0, 1]."""

    log10_eta_bounds: tuple[float, float] = (-12.0, 0.0)
    monotone: bool = True

    def __post_init__(self):
        lo, hi = self.log10_eta_bounds
        if not lo < hi <= 0:
            raise ValueError("log10_eta_bounds must satisfy lo < hi <= 0")

    def in_support(self, theta: NDArray[np.float64]) -> NDArray[np.bool_]:
        """Vectorized support test over the last axis of ``theta``."""
        theta = np.asarray(theta, dtype=float)
        lo, hi = self.log10_eta_bounds
        ok = (theta[..., 0] >= lo) & (theta[..., 0] <= hi)
        p = theta[..., 1:]
        ok &= np.all((p >= 0) & (p <= 1), axis=-1)
        if self.monotone and p.shape[-1] > 1:
            ok &= np.all(np.diff(p, axis=-1) >= 0, axis=-1)
        return ok & np.all(np.isfinite(theta), axis=-1)


@dataclass(frozen=True)
class Residuals:
    """Per-point residual table for a model evaluated on a dataset."""

    delta_p: NDArray[np.float64]
    delta_n: NDArray[np.float64]
    chi2: NDArray[np.float64]
    saturated: NDArray[np.bool_]

    @property
    def total(self) -> float:
        return float(np.sum(self.chi2))


def combine_orthogonal(delta_p, delta_n, sigma_p, sigma_n):
    """``[(sigma_p/dP)^2 + (sigma_n/dn)^2]^-1`` without dividing by a residual.

    With ``r, R`` the smaller and larger normalized residual the value is
    ``r^2 / (1 + (r/R)^2)``, which neither underflows nor divides by zero; a
    zero residual on either axis gives exactly zero.
    """
    a = np.abs(np.asarray(delta_p, dtype=float) / sigma_p)
    b = np.abs(np.asarray(delta_n, dtype=float) / sigma_n)
    small, large = np.minimum(a, b), np.maximum(a, b)
    ratio = small / np.where(large == 0, 1.0, large)
    return small**2 / (1.0 + ratio**2)


def _residual_arrays(eta, p, data: Dataset):
    """Residuals for a batch of models: ``eta`` shape (W,), ``p`` shape (W, n)."""
    eta = np.asarray(eta, dtype=float)
    p = np.asarray(p, dtype=float)
    n = data.mean_photons
    sp = data.sigma_p_click
    sn = data.sigma_mean_photons
    y = data.p_click

    delta_p = click_probability_mu(eta[:, None] * n, p[:, None, :]) - y

    monotone = np.all(np.diff(p, axis=-1) >= 0, axis=-1) if p.shape[-1] > 1 else np.ones(len(eta), bool)
    saturated = ~monotone[:, None] | (y >= 1.0)[None, :]
    p_safe = np.where(monotone[:, None], p, np.sort(p, axis=-1))
    target = np.where(saturated, 0.5, y)
    mu_star = solve_mu(target, p_safe[:, None, :])
    delta_n = np.where(saturated, np.nan, mu_star / eta[:, None] - n)

    chi2 = np.where(
        saturated,
        (delta_p / sp) ** 2,
        combine_orthogonal(delta_p, np.where(saturated, 0.0, delta_n), sp, sn),
    )
    return delta_p, delta_n, chi2, np.broadcast_to(saturated, chi2.shape)


def residuals(model: DetectorModel, data: Dataset) -> Residuals:
    dp, dn, chi2, sat = _residual_arrays([model.eta], [model.p], data)
    return Residuals(dp[0], dn[0], chi2[0], np.array(sat[0]))


def orthogonal_chi_square_term(model: DetectorModel, point: DataPoint) -> float:
    """Normalized orthogonal distance of one point from the model curve.

    Falls back to the vertical term when the horizontal residual is undefined
    (saturated point or non-monotone model); :func:`residuals` flags those.
    """
    return float(residuals(model, Dataset((point,))).chi2[0])


def log_likelihood(model: DetectorModel, data: Dataset) -> float:
    return -0.5 * residuals(model, data).total


def chi_square(model: DetectorModel, data: Dataset) -> float:
    return residuals(model, data).total


def log_posterior_batch(thetas, data: Dataset, prior: PriorSpec) -> NDArray[np.float64]:
    """Log posterior for parameter vectors ``[log10(eta), p_1, ..]`` stacked on axis 0.

    Outside the prior support the result is ``-inf``; inside, the flat prior
    contributes 0.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    out = np.full(len(thetas), -np.inf)
    ok = prior.in_support(thetas)
    if np.any(ok):
        good = thetas[ok]
        _, _, chi2, _ = _residual_arrays(10.0 ** good[:, 0], good[:, 1:], data)
        out[ok] = -0.5 * np.sum(chi2, axis=1)
    return out


def log_posterior(theta: Sequence[float], data: Dataset, prior: PriorSpec = PriorSpec()) -> float:
    return float(log_posterior_batch([theta], data, prior)[0])


def reduced_chi_square(chi2: float, n_points: int, k_params: int) -> float:
    dof = n_points - k_params
    if dof < 1:
        raise DegenerateFitError(f"{n_points} points and {k_params} parameters leave {dof} degrees of freedom")
    return chi2 / dof


def aic(chi2: float, k_params: int) -> float:
    """Akaike information criterion ``2k - 2 logL = 2k + chi2``."""
    if k_params < 1:
        raise ValueError("k_params must be >= 1")
    return 2 * k_params + chi2


def eta_total_error(eta_hat: float, sigma_stat: float, relative_systematic: float) -> float:
    """Statistical error combined in quadrature with a relative systematic error."""
    return float(np.hypot(sigma_stat, relative_systematic * eta_hat))
