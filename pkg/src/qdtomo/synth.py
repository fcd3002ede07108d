"""Synthetic experiments from a known detector, and the bridge-plus-taper geometry model."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .errors import InvalidGeometryError
from .events import (
    PowerReading,
    TagStream,
    WindowConfig,
    estimate_click_probability,
    power_to_mean_photons,
)
from .likelihood import DataPoint, Dataset, ExperimentMeta
from .model import DetectorModel, click_probability

REFERENCE_ETA = 1.60e-6
REFERENCE_P1 = 0.568


@dataclass(frozen=True)
class GroundTruth:
    model: DetectorModel
    power_settings: tuple[float, ...]
    trials_per_setting: int
    seed: int
    power_noise_relative: float = 0.03
    dark_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "power_settings", tuple(float(p) for p in self.power_settings))
        if not self.power_settings or min(self.power_settings) <= 0:
            raise ValueError("power settings must be strictly positive")
        if self.trials_per_setting < 1:
            raise ValueError("trials_per_setting must be >= 1")
        if self.power_noise_relative < 0 or self.dark_rate < 0:
            raise ValueError("noise level and dark rate must be non-negative")


@dataclass(frozen=True)
class SyntheticExperiment:
    dataset: Dataset
    readings: tuple[PowerReading, ...]
    true_mean_photons: NDArray[np.float64]
    true_p_click: NDArray[np.float64]
    streams: Optional[tuple[TagStream, ...]] = None


def log_spaced_powers(low: float, high: float, count: int) -> tuple[float, ...]:
    return tuple(np.geomspace(low, high, count))


def reference_fixture(seed: int, p1: float = REFERENCE_P1, trials: int = 300_000) -> GroundTruth:
    """25 powers from 5 nW to 7 uW, 3% power noise, detector at the published values."""
    return GroundTruth(
        model=DetectorModel(REFERENCE_ETA, (p1,)),
        power_settings=log_spaced_powers(5e-9, 7e-6, 25),
        trials_per_setting=trials,
        seed=seed,
    )


def _light_stream(rng, clicks, trials, cfg: WindowConfig, dark_rate: float, name: str) -> TagStream:
    light_idx = np.sort(rng.choice(trials, size=clicks, replace=False)) if clicks else np.empty(0, np.int64)
    # Jitter stays inside the central half of the window.
    jitter = np.clip(rng.normal(0.0, 0.1, size=clicks), -0.25, 0.25)
    light_delay = cfg.window_start + cfg.window_width * (0.5 + jitter)
    n_dark = rng.poisson(dark_rate * trials * cfg.pulse_period)
    dark_idx = rng.integers(0, trials, size=n_dark)
    dark_delay = rng.uniform(0.0, cfg.pulse_period, size=n_dark)
    idx = np.concatenate([light_idx, dark_idx]).astype(np.int64)
    delay = np.concatenate([light_delay, dark_delay])
    order = np.lexsort((delay, idx))
    return TagStream(idx[order], delay[order], trials, cfg.pulse_period, name)


def generate_dataset(
    truth: GroundTruth,
    meta: ExperimentMeta = ExperimentMeta(),
    *,
    with_streams: bool = False,
    window: Optional[WindowConfig] = None,
) -> SyntheticExperiment:
    """Draw one synthetic experiment.

    The recorded photon number is the nominal one; the detector sees it scaled
    by ``1 + noise * g`` with ``g`` standard normal. Each setting uses its own
    child seed, so settings are independent of evaluation order.
    """
    if window is None:
        window = WindowConfig(window_start=50e-9, pulse_period=1.0 / meta.rep_rate)
    elif window.window_start is None:
        window = replace(window, window_start=50e-9)
    children = np.random.SeedSequence(truth.seed).spawn(len(truth.power_settings))

    points, readings, streams, n_true, p_true = [], [], [], [], []
    for i, (power, child) in enumerate(zip(truth.power_settings, children)):
        rng = np.random.default_rng(child)
        reading = PowerReading(power, meta.power_meter_relative_error, meta.splitter_calibration)
        n_nominal, sigma_n = power_to_mean_photons(reading, meta)
        n_actual = max(n_nominal * (1.0 + truth.power_noise_relative * rng.standard_normal()), 0.0)
        p = click_probability(truth.model, n_actual)
        clicks = int(rng.binomial(truth.trials_per_setting, p))
        p_hat, sigma_p = estimate_click_probability(clicks, truth.trials_per_setting)
        points.append(DataPoint(n_nominal, sigma_n, p_hat, sigma_p, clicks, truth.trials_per_setting))
        readings.append(reading)
        n_true.append(n_actual)
        p_true.append(p)
        if with_streams:
            streams.append(_light_stream(rng, clicks, truth.trials_per_setting, window,
                                         truth.dark_rate, f"setting_{i:03d}"))

    order = np.argsort([pt.mean_photons for pt in points], kind="stable")
    return SyntheticExperiment(
        dataset=Dataset(tuple(points[i] for i in order), meta),
        readings=tuple(readings[i] for i in order),
        true_mean_photons=np.asarray(n_true)[order],
        true_p_click=np.asarray(p_true)[order],
        streams=tuple(streams[i] for i in order) if with_streams else None,
    )


@dataclass(frozen=True)
class BridgeGeometry:
    """Nanobridge with a widening taper on each side; all lengths in meters.

    The taper width is ``bridge_width + 2 x tan(half_angle)`` at distance ``x``
    from the bridge.
    """

    bridge_length: float = 120e-9
    bridge_width: float = 120e-9
    taper_length: float = 40e-9
    taper_half_angle: float = math.pi / 4
    lead_width: float = 500e-9

    def __post_init__(self):
        if min(self.bridge_length, self.bridge_width, self.lead_width) <= 0 or self.taper_length < 0:
            raise InvalidGeometryError("lengths must be positive")
        if not 0 < self.taper_half_angle < math.pi / 2:
            raise InvalidGeometryError("taper half angle must lie in (0, pi/2)")
        if self.bridge_width >= self.lead_width:
            raise InvalidGeometryError("bridge must be narrower than the lead")
        if self.taper_length > self.max_taper_length * (1 + 1e-12):
            raise InvalidGeometryError(
                f"taper length {self.taper_length:g} m exceeds the {self.max_taper_length:g} m "
                "at which the taper reaches the lead width"
            )

    @property
    def max_taper_length(self) -> float:
        return (self.lead_width - self.bridge_width) / (2 * math.tan(self.taper_half_angle))

    def width_at(self, x):
        w = self.bridge_width + 2 * np.asarray(x, dtype=float) * math.tan(self.taper_half_angle)
        return np.minimum(w, self.lead_width)


def taper_active_area(geometry: BridgeGeometry) -> float:
    """Area of one taper within ``taper_length`` of the bridge (trapezoid)."""
    L = geometry.taper_length
    return geometry.bridge_width * L + L * L * math.tan(geometry.taper_half_angle)


def taper_effective_p1(geometry: BridgeGeometry) -> float:
    """Area-weighted single-photon efficiency of bridge (p1 = 1) plus two tapers (p1 = 0)."""
    bridge = geometry.bridge_length * geometry.bridge_width
    return bridge / (bridge + 2 * taper_active_area(geometry))


def taper_length_for_p1(p1: float, geometry: BridgeGeometry = BridgeGeometry()) -> float:
    """Taper length (per side) at which :func:`taper_effective_p1` equals ``p1``."""
    lowest = taper_effective_p1(replace(geometry, taper_length=geometry.max_taper_length))
    if not lowest <= p1 <= 1:
        raise InvalidGeometryError(f"p1 = {p1} is not reachable; geometry allows [{lowest:.4g}, 1]")
    if p1 == 1:
        return 0.0

    def f(L):
        return taper_effective_p1(replace(geometry, taper_length=L)) - p1

    return brentq(f, 0.0, geometry.max_taper_length, xtol=1e-18)


def long_wire_p2_bound(p1: float) -> float:
    """Two independent absorptions at different spots click unless both fail."""
    if not 0 <= p1 <= 1:
        raise ValueError("p1 must lie in [0, 1]")
    # 1 - (1 - p1)^2 written to keep precision at small p1
    return p1 * (2.0 - p1)
