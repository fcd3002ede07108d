"""Command-line front end: simulate, events, fit, select, report."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import formats
from .errors import ConvergenceWarning, TomographyError
from .events import (
    DEFAULT_WINDOW_WIDTH,
    WindowConfig,
    dataset_from_results,
    dead_time_overlap_rate,
    process_settings,
)
from .fitting import fit, format_selection, read_report, select_models, write_report
from .likelihood import ExperimentMeta, PriorSpec
from .model import DetectorModel, click_probability, low_flux_slope
from .sampler import SamplerSettings, corner_export, read_chain, write_chain
from .synth import GroundTruth, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3
OUTPUT_DIR_ENV = "QDTOMO_OUTPUT_DIR"

log = logging.getLogger("qdtomo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


def _output_path(value, default_name: str) -> Path:
    return Path(value) if value else _default_dir() / default_name


def _check_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def parse_powers(text: str) -> tuple[float, ...]:
    """``lo:hi:Nlog``, ``lo:hi:Nlin`` or a comma-separated list, in watts."""
    try:
        if ":" in text:
            lo, hi, count = text.split(":")
            kind = "log" if count.endswith("log") else "lin" if count.endswith("lin") else None
            if kind is None:
                raise ValueError
            n = int(count[:-3])
            grid = np.geomspace if kind == "log" else np.linspace
            return tuple(float(v) for v in grid(float(lo), float(hi), n))
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"cannot parse power grid {text!r}") from None


def _meta_from(args) -> ExperimentMeta:
    return ExperimentMeta(
        wavelength=args.wavelength,
        rep_rate=args.rep_rate,
        power_meter_relative_error=args.relative_error,
        splitter_calibration=args.splitter_calibration,
    )


def _settings_from(args) -> SamplerSettings:
    try:
        return SamplerSettings(seed=args.seed, walkers=args.walkers, steps=args.steps,
                               burn_in=args.burn_in, thin=args.thin, a=args.stretch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _prior_from(args) -> PriorSpec:
    try:
        return PriorSpec(tuple(args.log_eta_bounds), monotone=not args.relax_monotone)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(args) -> int:
    out = _output_path(args.out, "data.csv")
    _check_overwrite(out, args.force)
    truth = GroundTruth(
        model=DetectorModel(args.eta, tuple(args.p)),
        power_settings=parse_powers(args.powers),
        trials_per_setting=args.trials,
        seed=args.seed,
        power_noise_relative=args.noise,
        dark_rate=args.dark_rate,
    )
    meta = _meta_from(args)
    window = WindowConfig(args.window_start, args.window, 1.0 / meta.rep_rate)
    exp = generate_dataset(truth, meta, with_streams=args.streams is not None, window=window)
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_dataset(out, exp.dataset)
    print(f"wrote {len(exp.dataset)} settings to {out}")
    if args.streams is not None:
        sdir = Path(args.streams)
        manifest = sdir / "manifest.csv"
        _check_overwrite(manifest, args.force)
        sdir.mkdir(parents=True, exist_ok=True)
        entries = []
        for stream, reading in zip(exp.streams, exp.readings):
            name = f"{stream.name}.tags"
            formats.write_tag_stream(sdir / name, stream)
            entries.append((name, reading))
        formats.write_manifest(manifest, entries)
        print(f"wrote {len(entries)} tag streams and {manifest}")
    return EXIT_OK


def cmd_events(args) -> int:
    out = _output_path(args.out, "data.csv")
    _check_overwrite(out, args.force)
    meta = _meta_from(args)
    cfg = WindowConfig(args.window_start, args.window, 1.0 / meta.rep_rate)
    print(f"window width {args.window * 1e9:g} ns")
    settings = []
    for path, reading in formats.read_manifest(args.manifest):
        stream = formats.read_tag_stream(path, period=cfg.pulse_period)
        settings.append((stream, reading))
    results = process_settings(settings, cfg, meta,
                               args.recovery_time if args.apply_dead_time else None)
    print(f"window start {results[0].classification.window_start * 1e9:.4g} ns")
    print("setting,pulses,light,dark,duplicate,p_click,sigma_p_click")
    for r in results:
        c = r.classification
        print(f"{Path(r.name).name},{r.pulses},{c.light},{c.dark},{c.duplicate},"
              f"{r.point.p_click:.6g},{r.point.sigma_p_click:.3g}")
    total_dark = sum(r.classification.dark for r in results)
    total_pulses = sum(r.pulses for r in results)
    dark_rate = total_dark / (total_pulses * (cfg.pulse_period - cfg.window_width))
    per_second, correction = dead_time_overlap_rate(dark_rate, args.recovery_time, meta.rep_rate)
    print(f"dark rate {dark_rate:.4g} /s; detector blind during {per_second:.4g} pulses/s "
          f"(probability correction {correction:.3g}, "
          f"{'applied' if args.apply_dead_time else 'not applied'})")
    data = dataset_from_results(results, meta)
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_dataset(out, data)
    print(f"wrote {out}")
    return EXIT_OK


def _fit_and_collect(data, n_max, settings, prior):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        report, chain = fit(data, n_max, settings, prior)
    for w in caught:
        if not issubclass(w.category, ConvergenceWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return report, chain


def cmd_fit(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else _default_dir()
    report_path, chain_path = out_dir / "report.txt", out_dir / "chain.csv"
    for p in (report_path, chain_path):
        _check_overwrite(p, args.force)
    settings, prior = _settings_from(args), _prior_from(args)
    data = formats.read_dataset(args.data)
    report, chain = _fit_and_collect(data, args.n_max, settings, prior)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report_path, report)
    write_chain(chain_path, chain)
    corner_export(chain, args.bins).write(out_dir / "corner")
    for name, med, lo, hi in zip(report.names, report.median, report.p16, report.p84):
        print(f"{name} = {med:.6g} (+{hi - med:.2g} / -{med - lo:.2g})")
    print(f"eta total error (with {report.eta_relative_systematic:g} systematic) = {report.eta_total_error:.3g}")
    print(f"chi2 = {report.chi2:.4g}, dof = {report.dof}, chi2_r = {report.chi2_r:.4g}, AIC = {report.aic:.4g}")
    print(f"acceptance fraction = {report.acceptance_fraction:.3f}")
    print(f"wrote {report_path}, {chain_path}, {out_dir / 'corner'}")
    for msg in report.warnings:
        print(f"convergence warning: {msg}", file=sys.stderr)
    return EXIT_CONVERGENCE if report.warnings else EXIT_OK


def cmd_select(args) -> int:
    settings, prior = _settings_from(args), _prior_from(args)
    data = formats.read_dataset(args.data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        rows, _ = select_models(data, args.max_n_max, settings, prior)
    table = format_selection(rows)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        _check_overwrite(out, args.force)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
    if not any(r.best for r in rows):
        return EXIT_DATA
    return EXIT_OK


def _write_table(path: Path, header: str, columns) -> None:
    np.savetxt(path, np.column_stack(columns), delimiter=",", fmt="%.17g", header=header)


def cmd_report(args) -> int:
    report = read_report(args.report)
    data = formats.read_dataset(args.data)
    out_dir = Path(args.out_dir) if args.out_dir else _default_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    model = report.best_model
    ideal = DetectorModel.ideal(low_flux_slope(model))
    n = data.mean_photons
    grid = np.geomspace(n.min() / 3, n.max() * 3, args.grid_points)

    _write_table(out_dir / "data.csv",
                 "mean_photons,sigma_mean_photons,p_click,sigma_p_click,model_p_click,ideal_p_click",
                 [n, data.sigma_mean_photons, data.p_click, data.sigma_p_click,
                  click_probability(model, n), click_probability(ideal, n)])
    _write_table(out_dir / "curve.csv", "mean_photons,p_click", [grid, click_probability(model, grid)])
    _write_table(out_dir / "ideal.csv", f"eta_ideal={ideal.eta!r}\nmean_photons,p_click",
                 [grid, click_probability(ideal, grid)])
    t = report.residual_table
    if t:
        _write_table(out_dir / "residuals.csv", ",".join(t), [np.asarray(t[c], dtype=float) for c in t])
    if args.chain:
        corner_export(read_chain(args.chain), args.bins).write(out_dir / "corner")
    print(f"wrote plot data to {out_dir}")
    return EXIT_OK


def _add_meta_args(p):
    p.add_argument("--wavelength", type=float, default=850e-9, help="meters")
    p.add_argument("--rep-rate", type=float, default=5e6, help="laser repetition rate, Hz")
    p.add_argument("--relative-error", type=float, default=0.03, help="power meter relative error")
    p.add_argument("--splitter-calibration", type=float, default=1.0)


def _add_sampler_args(p, steps=4000):
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--walkers", type=int, default=32)
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--stretch", type=float, default=2.0, help="stretch move scale a")
    p.add_argument("--log-eta-bounds", type=float, nargs=2, default=(-12.0, 0.0))
    p.add_argument("--relax-monotone", action="store_true", help="drop the p_1 <= p_2 <= .. constraint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qdtomo", description="Detector tomography from coherent-state click statistics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--p", type=float, nargs="*", default=[], help="internal efficiencies p_1..p_nmax")
    p.add_argument("--powers", required=True, help="lo:hi:Nlog, lo:hi:Nlin or comma list (W)")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.03, help="relative power fluctuation")
    p.add_argument("--dark-rate", type=float, default=0.0, help="dark counts per second")
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW_WIDTH)
    p.add_argument("--window-start", type=float, default=50e-9)
    p.add_argument("--streams", help="directory for tag streams and manifest.csv")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    _add_meta_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("events", help="build a dataset from tag streams")
    p.add_argument("--manifest", required=True, help="CSV: stream,average_power,relative_error,splitter_calibration")
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW_WIDTH, help="window width, s")
    p.add_argument("--window-start", type=float, default=None, help="s; automatic when omitted")
    p.add_argument("--recovery-time", type=float, default=14e-9, help="1/e recovery time, s")
    p.add_argument("--apply-dead-time", action="store_true")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    _add_meta_args(p)
    p.set_defaults(func=cmd_events)

    p = sub.add_parser("fit", help="sample the posterior of one model")
    p.add_argument("--data", required=True)
    p.add_argument("--n-max", type=int, default=1)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true")
    _add_sampler_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="compare models by AIC")
    p.add_argument("--data", required=True)
    p.add_argument("--max-n-max", type=int, default=2)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    _add_sampler_args(p, steps=2000)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("report", help="export plot-ready tables")
    p.add_argument("--report", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--chain")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--grid-points", type=int, default=200)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qdtomo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TomographyError, ValueError, OSError) as exc:
        print(f"qdtomo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
