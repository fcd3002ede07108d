"""Delimited-text formats for datasets, tag streams and power manifests.

Floats are written with ``repr`` so every file round-trips exactly.
"""
from __future__ import annotations

import csv
import io
import warnings
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import MalformedStreamError
from .events import PowerReading, TagStream
from .likelihood import DataPoint, Dataset, ExperimentMeta

DATASET_COLUMNS = ("mean_photons", "sigma_mean_photons", "clicks", "trials", "p_click", "sigma_p_click")
_META_KEYS = ("wavelength", "rep_rate", "power_meter_relative_error", "splitter_calibration",
              "temperature", "bias_current")


def _read_header(lines: Iterable[str]) -> tuple[dict[str, str], list[str]]:
    header, body = {}, []
    for line in lines:
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    return header, body


def format_dataset(data: Dataset) -> str:
    out = io.StringIO()
    out.write("# qdtomo dataset\n")
    for key in _META_KEYS:
        value = getattr(data.meta, key)
        if value is not None:
            out.write(f"# {key}={value!r}\n")
    out.write(",".join(DATASET_COLUMNS) + "\n")
    for pt in data.points:
        clicks = "" if pt.clicks is None else str(pt.clicks)
        trials = "" if pt.trials is None else str(pt.trials)
        out.write(f"{pt.mean_photons!r},{pt.sigma_mean_photons!r},{clicks},{trials},"
                  f"{pt.p_click!r},{pt.sigma_p_click!r}\n")
    return out.getvalue()


def parse_dataset(text: str) -> Dataset:
    header, body = _read_header(text.splitlines())
    meta = ExperimentMeta(**{k: float(header[k]) for k in _META_KEYS if k in header})
    rows = list(csv.DictReader(body))
    if not rows:
        raise ValueError("dataset file has no data rows")
    missing = set(DATASET_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"dataset file lacks columns {sorted(missing)}")
    points = []
    for row in rows:
        points.append(DataPoint(
            float(row["mean_photons"]), float(row["sigma_mean_photons"]),
            float(row["p_click"]), float(row["sigma_p_click"]),
            int(row["clicks"]) if row["clicks"] else None,
            int(row["trials"]) if row["trials"] else None,
        ))
    return Dataset(tuple(points), meta)


def write_dataset(path, data: Dataset) -> None:
    Path(path).write_text(format_dataset(data))


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_text())


def write_tag_stream(path, stream: TagStream) -> None:
    with open(path, "w") as fh:
        fh.write(f"# period={stream.period!r}\n")
        fh.write(f"# pulses={stream.pulses}\n")
        if len(stream):
            np.savetxt(fh, np.column_stack([stream.pulse_indices, stream.delays]),
                       delimiter=",", fmt=["%d", "%.17g"])


def read_tag_stream(path, period: Optional[float] = None) -> TagStream:
    """Read ``pulse_index,delay_seconds`` lines.

    Without a ``# pulses=`` header the pulse count is one past the largest
    index, which is zero for an empty stream.
    """
    path = Path(path)
    header = {}
    n_comment = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            n_comment += 1
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
    if "period" in header:
        period = float(header["period"])
    if period is None:
        raise MalformedStreamError(f"{path}: missing '# period=' header")
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message=".*[Ee]mpty input file.*")
            warnings.filterwarnings("ignore", message=".*no data.*")
            table = np.loadtxt(path, delimiter=",", skiprows=n_comment, ndmin=2)
    except ValueError as exc:
        raise MalformedStreamError(f"{path}: {exc}") from exc
    if table.size == 0:
        idx, delay = np.empty(0, np.int64), np.empty(0)
    else:
        if table.shape[1] != 2:
            raise MalformedStreamError(f"{path}: expected 2 columns, found {table.shape[1]}")
        idx = table[:, 0].astype(np.int64)
        if np.any(idx != table[:, 0]) or np.any(idx < 0):
            raise MalformedStreamError(f"{path}: pulse indices must be non-negative integers")
        delay = table[:, 1]
    pulses = int(header["pulses"]) if "pulses" in header else (int(idx.max()) + 1 if idx.size else 0)
    return TagStream(idx, delay, pulses, period, str(path))


MANIFEST_COLUMNS = ("stream", "average_power", "relative_error", "splitter_calibration")


def write_manifest(path, entries: Iterable[tuple[str, PowerReading]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for name, r in entries:
            writer.writerow([name, repr(r.average_power), repr(r.relative_error), repr(r.splitter_calibration)])


def read_manifest(path) -> list[tuple[Path, PowerReading]]:
    """Stream paths resolved relative to the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    out = []
    for row in rows:
        reading = PowerReading(
            float(row["average_power"]),
            float(row.get("relative_error") or 0.03),
            float(row.get("splitter_calibration") or 1.0),
        )
        out.append((path.parent / row["stream"], reading))
    return out
