"""Time-tag streams to click probabilities.

A detector event is *light* when its delay after the laser sync edge falls in
the coincidence window and *dark* otherwise. Dark events are tallied but never
enter the click probability.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.constants import c as SPEED_OF_LIGHT, h as PLANCK

from .errors import EmptySettingError, MalformedStreamError
from .likelihood import DEFAULT_POWER_METER_ERROR, DataPoint, Dataset, ExperimentMeta

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_WIDTH = 2e-9


class EventClass(Enum):
    LIGHT = "light"
    DARK = "dark"
    DUPLICATE = "duplicate"  # light event in a pulse that already clicked
    UNCLASSIFIED = "unclassified"


_CODES = (EventClass.LIGHT, EventClass.DARK, EventClass.DUPLICATE, EventClass.UNCLASSIFIED)


@dataclass(frozen=True)
class TimeTagRecord:
    pulse_index: int
    delay: float
    classification: EventClass = EventClass.UNCLASSIFIED


@dataclass(frozen=True)
class WindowConfig:
    """Coincidence window; ``window_start=None`` means place it automatically."""

    window_start: Optional[float] = None
    window_width: float = DEFAULT_WINDOW_WIDTH
    pulse_period: float = 200e-9

    def __post_init__(self):
        if not 0 < self.window_width < self.pulse_period:
            raise ValueError("window width must lie in (0, pulse_period)")

    @classmethod
    def for_rep_rate(cls, rep_rate: float, **kwargs) -> "WindowConfig":
        return cls(pulse_period=1.0 / rep_rate, **kwargs)


@dataclass(frozen=True)
class PowerReading:
    average_power: float
    relative_error: float = DEFAULT_POWER_METER_ERROR
    splitter_calibration: float = 1.0

    def __post_init__(self):
        if not self.average_power >= 0:
            raise ValueError("average_power must be non-negative")
        if not self.splitter_calibration > 0:
            raise ValueError("splitter_calibration must be positive")


@dataclass(frozen=True)
class TagStream:
    """Detector events of one power setting, ordered by pulse index."""

    pulse_indices: NDArray[np.int64]
    delays: NDArray[np.float64]
    pulses: int
    period: float
    name: str = "<stream>"

    def __post_init__(self):
        object.__setattr__(self, "pulse_indices", np.asarray(self.pulse_indices, dtype=np.int64))
        object.__setattr__(self, "delays", np.asarray(self.delays, dtype=float))
        if self.pulse_indices.shape != self.delays.shape:
            raise MalformedStreamError(f"{self.name}: pulse index and delay columns differ in length")

    def __len__(self):
        return len(self.delays)


@dataclass(frozen=True)
class Classification:
    pulse_indices: NDArray[np.int64]
    delays: NDArray[np.float64]
    codes: NDArray[np.int8]  # index into _CODES
    window_start: float
    light: int
    dark: int
    duplicate: int

    @property
    def total(self) -> int:
        return len(self.codes)

    def records(self) -> Iterator[TimeTagRecord]:
        for i, d, c in zip(self.pulse_indices, self.delays, self.codes):
            yield TimeTagRecord(int(i), float(d), _CODES[c])


def auto_window_start(delays: ArrayLike, cfg: WindowConfig) -> float:
    """Mode of the delay histogram minus half the window width."""
    delays = np.asarray(delays, dtype=float)
    if delays.size == 0:
        raise EmptySettingError("cannot place a window without any events")
    bin_width = cfg.window_width / 20
    lo, hi = float(np.min(delays)), float(np.max(delays))
    n_bins = max(1, int(np.ceil((hi - lo) / bin_width)))
    counts, edges = np.histogram(delays, bins=n_bins, range=(lo, lo + n_bins * bin_width))
    k = int(np.argmax(counts))
    return 0.5 * (edges[k] + edges[k + 1]) - 0.5 * cfg.window_width


def classify_events(pulse_indices: ArrayLike, delays: ArrayLike, cfg: WindowConfig) -> Classification:
    """Split events into light, dark and duplicate-light classes."""
    idx = np.asarray(pulse_indices, dtype=np.int64)
    delays = np.asarray(delays, dtype=float)
    if idx.shape != delays.shape:
        raise MalformedStreamError("pulse index and delay arrays differ in length")
    if idx.size and np.any(np.diff(idx) < 0):
        bad = int(np.argmax(np.diff(idx) < 0)) + 1
        raise MalformedStreamError(f"pulse index decreases at event {bad}")
    if not np.all(np.isfinite(delays)):
        raise MalformedStreamError("non-finite delay")
    if np.any(np.abs(delays) >= cfg.pulse_period):
        raise MalformedStreamError("delay exceeds one pulse period")

    start = cfg.window_start if cfg.window_start is not None else auto_window_start(delays, cfg)
    inside = (delays >= start) & (delays <= start + cfg.window_width)
    codes = np.where(inside, 0, 1).astype(np.int8)
    light_pulses = idx[inside]
    repeat = np.zeros(light_pulses.shape, dtype=bool)
    repeat[1:] = light_pulses[1:] == light_pulses[:-1]
    light_pos = np.flatnonzero(inside)
    codes[light_pos[repeat]] = 2

    counts = np.bincount(codes, minlength=3)
    return Classification(idx, delays, codes, float(start), int(counts[0]), int(counts[1]), int(counts[2]))


def estimate_click_probability(light_count: int, pulse_count: int) -> tuple[float, float]:
    """Posterior mean and standard deviation of a binomial proportion, Jeffreys prior.

    Beta(k + 1/2, N - k + 1/2) has mean (k + 1/2)/(N + 1) and variance
    mean (1 - mean)/(N + 2); both stay inside (0, 1) even for k = 0 or k = N.
    """
    if pulse_count < 1:
        raise ValueError("pulse_count must be >= 1")
    if not 0 <= light_count <= pulse_count:
        raise ValueError("light_count must lie in [0, pulse_count]")
    p = (light_count + 0.5) / (pulse_count + 1)
    return p, float(np.sqrt(p * (1 - p) / (pulse_count + 2)))


def photon_energy(wavelength: float) -> float:
    return PLANCK * SPEED_OF_LIGHT / wavelength


def power_to_mean_photons(reading: PowerReading, meta: ExperimentMeta) -> tuple[float, float]:
    """Mean photons per pulse at the detector and its power-meter error."""
    pulse_energy = reading.average_power * reading.splitter_calibration / meta.rep_rate
    n = pulse_energy / photon_energy(meta.wavelength)
    return n, reading.relative_error * n


def dead_time_overlap_rate(dark_rate: float, recovery_time: float, rep_rate: float) -> tuple[float, float]:
    """Light pulses per second that arrive while a dark count keeps the detector blind.

    Returns ``(events_per_second, probability_correction)``; nothing is applied.
    """
    if dark_rate < 0 or recovery_time < 0 or rep_rate <= 0:
        raise ValueError("dark_rate and recovery_time must be >= 0, rep_rate > 0")
    fraction = dark_rate * recovery_time
    return fraction * rep_rate, fraction


def estimate_dark_rate(dark_count: int, pulses: int, cfg: WindowConfig) -> float:
    """Dark counts per second, from events outside the window."""
    if pulses < 1:
        return 0.0
    return dark_count / (pulses * (cfg.pulse_period - cfg.window_width))


@dataclass(frozen=True)
class SettingResult:
    name: str
    point: DataPoint
    classification: Classification
    pulses: int
    dark_rate: float


def process_setting(
    stream: TagStream,
    reading: PowerReading,
    cfg: WindowConfig,
    meta: ExperimentMeta,
    dead_time_recovery: Optional[float] = None,
) -> SettingResult:
    """One DataPoint from one stream.

    With ``dead_time_recovery`` set, the click probability is divided by
    ``1 - dark_rate * recovery`` (off by default).
    """
    if stream.pulses < 1:
        raise EmptySettingError(f"{stream.name}: stream has zero pulses")
    cls = classify_events(stream.pulse_indices, stream.delays, cfg)
    if stream.pulses <= (int(stream.pulse_indices.max()) if len(stream) else -1):
        raise MalformedStreamError(f"{stream.name}: pulse index beyond declared pulse count")
    k, trials = cls.light, stream.pulses
    p, sigma = estimate_click_probability(k, trials)
    dark_rate = estimate_dark_rate(cls.dark, trials, cfg)
    if dead_time_recovery is not None:
        _, corr = dead_time_overlap_rate(dark_rate, dead_time_recovery, meta.rep_rate)
        p, sigma = min(p / (1 - corr), 1.0), sigma / (1 - corr)
    n, sigma_n = power_to_mean_photons(reading, meta)
    point = DataPoint(n, sigma_n, p, sigma, k, trials)
    return SettingResult(stream.name, point, cls, trials, dark_rate)


def build_dataset(
    settings: Sequence[tuple[TagStream, PowerReading]],
    cfg: WindowConfig,
    meta: ExperimentMeta,
    dead_time_recovery: Optional[float] = None,
) -> Dataset:
    return dataset_from_results(process_settings(settings, cfg, meta, dead_time_recovery), meta)


def process_settings(settings, cfg, meta, dead_time_recovery=None) -> list[SettingResult]:
    """Process every setting; an unset window start is placed from all delays pooled."""
    if len(settings) < 3:
        raise ValueError("need at least 3 power settings")
    for stream, _ in settings:
        if stream.pulses < 1:
            raise EmptySettingError(f"{stream.name}: stream has zero pulses")
    if cfg.window_start is None:
        pooled = np.concatenate([s.delays for s, _ in settings])
        cfg = WindowConfig(auto_window_start(pooled, cfg), cfg.window_width, cfg.pulse_period)
        logger.info("window placed at %.3g s", cfg.window_start)
    return [process_setting(s, r, cfg, meta, dead_time_recovery) for s, r in settings]


def dataset_from_results(results: Sequence[SettingResult], meta: ExperimentMeta) -> Dataset:
    return Dataset(tuple(r.point for r in results), meta).sorted()
