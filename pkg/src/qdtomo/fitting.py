"""Fit pipeline, model comparison and the structured-text fit report."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import DegenerateFitError, TomographyError
from .formats import format_dataset
from .likelihood import (
    Dataset,
    PriorSpec,
    aic,
    eta_total_error,
    log_posterior,
    reduced_chi_square,
    residuals,
)
from .model import DetectorModel
from .sampler import Chain, SamplerSettings, run_sampler, summarize

logger = logging.getLogger(__name__)


def dataset_digest(data: Dataset) -> str:
    return hashlib.sha256(format_dataset(data).encode()).hexdigest()


@dataclass
class FitReport:
    n_max: int
    k_params: int
    log10_eta_bounds: list[float]
    monotone: bool
    names: list[str]
    median: list[float]
    p16: list[float]
    p84: list[float]
    best_fit: list[float]
    eta_stat_error: float
    eta_relative_systematic: float
    eta_total_error: float
    chi2: float
    dof: int
    chi2_r: float
    aic: float
    correlation: list[list[float]]
    acceptance_fraction: float
    autocorr_time: Optional[list[float]]
    settings: dict
    data_sha256: str
    warnings: list[str] = field(default_factory=list)
    residual_table: dict[str, list] = field(default_factory=dict)
    interval_convention: str = "16th/50th/84th percentiles"

    @property
    def best_model(self) -> DetectorModel:
        return DetectorModel(self.best_fit[0], tuple(self.best_fit[1:]))

    @property
    def converged(self) -> bool:
        return not self.warnings


def _polish(theta0, data: Dataset, prior: PriorSpec):
    """Nelder-Mead from the best sample; keeps the start if nothing improves."""
    def cost(theta):
        lp = log_posterior(theta, data, prior)
        return -lp if np.isfinite(lp) else 1e300

    start = cost(theta0)
    res = minimize(cost, theta0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 4000})
    if res.fun < start:
        return np.asarray(res.x), -float(res.fun)
    return np.asarray(theta0), -start


def fit(
    data: Dataset,
    n_max: int,
    settings: SamplerSettings,
    prior: PriorSpec = PriorSpec(),
    *,
    map_fn=None,
) -> tuple[FitReport, Chain]:
    """Sample the posterior and reduce it to a :class:`FitReport`.

    The chi-square, AIC and residuals are evaluated at the best fit: the
    highest-posterior sample refined by a local simplex search.
    """
    k = 1 + n_max
    if len(data) - k < 1:
        raise DegenerateFitError(f"{len(data)} points cannot constrain {k} parameters")
    chain = run_sampler(data, n_max, settings, prior, map_fn=map_fn)
    summary = summarize(chain)

    flat = chain.flat()
    theta0 = flat[int(np.argmax(chain.flat_log_probs()))]
    theta, _ = _polish(theta0, data, prior)
    best = DetectorModel.from_params(theta)

    res = residuals(best, data)
    chi2 = res.total
    dof = len(data) - k
    sigma_eta = float(summary.sigma()[0])
    rel_sys = data.meta.power_meter_relative_error
    table = {
        "mean_photons": data.mean_photons.tolist(),
        "p_click": data.p_click.tolist(),
        "delta_p": res.delta_p.tolist(),
        "delta_n": res.delta_n.tolist(),
        "chi2": res.chi2.tolist(),
        "saturated": res.saturated.astype(int).tolist(),
    }
    report = FitReport(
        n_max=n_max,
        k_params=k,
        log10_eta_bounds=list(prior.log10_eta_bounds),
        monotone=prior.monotone,
        names=summary.names,
        median=summary.median.tolist(),
        p16=summary.p16.tolist(),
        p84=summary.p84.tolist(),
        best_fit=[best.eta, *best.p],
        eta_stat_error=sigma_eta,
        eta_relative_systematic=rel_sys,
        eta_total_error=eta_total_error(float(summary.median[0]), sigma_eta, rel_sys),
        chi2=chi2,
        dof=dof,
        chi2_r=reduced_chi_square(chi2, len(data), k),
        aic=aic(chi2, k),
        correlation=summary.correlation.tolist(),
        acceptance_fraction=chain.acceptance_fraction,
        autocorr_time=chain.meta.get("autocorr_time"),
        settings={**asdict(settings), "burn_in_used": chain.meta["burn_in"], "thin_used": chain.meta["thin"]},
        data_sha256=dataset_digest(data),
        warnings=list(chain.meta.get("warnings", [])),
        residual_table=table,
    )
    return report, chain


@dataclass
class SelectionRow:
    n_max: int
    k_params: int
    chi2: float = float("nan")
    dof: int = 0
    chi2_r: float = float("nan")
    aic: float = float("nan")
    delta_aic: float = float("nan")
    best: bool = False
    error: str = ""


def select_models(
    data: Dataset,
    max_n_max: int,
    settings: SamplerSettings,
    prior: PriorSpec = PriorSpec(),
) -> tuple[list[SelectionRow], dict[int, FitReport]]:
    """Fit every ``n_max`` from 0 (ideal threshold detector, eta only) to ``max_n_max``."""
    rows, reports = [], {}
    for n_max in range(max_n_max + 1):
        row = SelectionRow(n_max, 1 + n_max)
        try:
            report, _ = fit(data, n_max, settings, prior)
        except TomographyError as exc:
            logger.warning("model n_max=%d failed: %s", n_max, exc)
            row.error = str(exc)
        else:
            reports[n_max] = report
            row.chi2, row.dof, row.chi2_r, row.aic = report.chi2, report.dof, report.chi2_r, report.aic
        rows.append(row)
    valid = [r for r in rows if not r.error]
    if valid:
        lowest = min(r.aic for r in valid)
        for r in valid:
            r.delta_aic = r.aic - lowest
        min(valid, key=lambda r: r.aic).best = True
    return rows, reports


def format_selection(rows: list[SelectionRow]) -> str:
    lines = ["n_max,k,chi2,dof,chi2_r,aic,delta_aic,best,error"]
    for r in rows:
        lines.append(f"{r.n_max},{r.k_params},{r.chi2!r},{r.dof},{r.chi2_r!r},{r.aic!r},"
                     f"{r.delta_aic!r},{int(r.best)},{r.error}")
    return "\n".join(lines) + "\n"


# --- report text format -----------------------------------------------------
# "[section]" headers; [fit] holds "key = <json>" lines; [parameters],
# [correlation] and [residuals] hold CSV tables.

_SCALAR_FIELDS = (
    "n_max", "k_params", "log10_eta_bounds", "monotone", "eta_stat_error",
    "eta_relative_systematic", "eta_total_error", "chi2", "dof", "chi2_r", "aic",
    "acceptance_fraction", "autocorr_time", "settings", "data_sha256", "warnings",
    "interval_convention",
)


def format_report(report: FitReport) -> str:
    out = ["# qdtomo fit report", "[fit]"]
    for name in _SCALAR_FIELDS:
        out.append(f"{name} = {json.dumps(getattr(report, name), sort_keys=True)}")
    out += ["", "[parameters]", "name,median,p16,p84,best_fit"]
    for i, name in enumerate(report.names):
        out.append(f"{name},{report.median[i]!r},{report.p16[i]!r},{report.p84[i]!r},{report.best_fit[i]!r}")
    out += ["", "[correlation]", "name," + ",".join(report.names)]
    for name, row in zip(report.names, report.correlation):
        out.append(name + "," + ",".join(repr(float(v)) for v in row))
    cols = list(report.residual_table)
    out += ["", "[residuals]", ",".join(cols)]
    for values in zip(*(report.residual_table[c] for c in cols)):
        out.append(",".join(repr(v) for v in values))
    return "\n".join(out) + "\n"


def parse_report(text: str) -> FitReport:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if line.startswith("[") and line.rstrip().endswith("]"):
            current = line.strip()[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    scalars = {}
    for line in sections["fit"]:
        key, _, value = line.partition(" = ")
        scalars[key.strip()] = json.loads(value)
    params = [line.split(",") for line in sections["parameters"][1:]]
    corr = [[float(v) for v in line.split(",")[1:]] for line in sections["correlation"][1:]]
    res_lines = sections.get("residuals", [])
    table: dict[str, list] = {}
    if res_lines:
        cols = res_lines[0].split(",")
        rows = [line.split(",") for line in res_lines[1:]]
        for j, c in enumerate(cols):
            conv = int if c == "saturated" else float
            table[c] = [conv(r[j]) for r in rows]
    return FitReport(
        names=[p[0] for p in params],
        median=[float(p[1]) for p in params],
        p16=[float(p[2]) for p in params],
        p84=[float(p[3]) for p in params],
        best_fit=[float(p[4]) for p in params],
        correlation=corr,
        residual_table=table,
        **scalars,
    )


def write_report(path, report: FitReport) -> None:
    Path(path).write_text(format_report(report))


def read_report(path) -> FitReport:
    return parse_report(Path(path).read_text())
