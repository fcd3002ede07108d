"""Affine-invariant ensemble sampler (stretch move) and posterior summaries.

Every step draws its random numbers from a generator keyed by
``(seed, step_index)`` before any log-probability is evaluated, so a chain
depends only on the seed and the initial ensemble. It does not depend on how
the evaluations are scheduled.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    ChainTooShortError,
    ConvergenceWarning,
    DegenerateChainError,
    InsufficientDataWarning,
)
from .likelihood import Dataset, PriorSpec, log_posterior_batch


@dataclass(frozen=True)
class SamplerSettings:
    seed: int
    walkers: int = 32
    steps: int = 4000
    burn_in: Optional[int] = None
    thin: Optional[int] = None
    a: float = 2.0

    def __post_init__(self):
        if self.walkers < 2 or self.walkers % 2:
            raise ValueError("walkers must be an even number >= 2")
        if self.a <= 1:
            raise ValueError("stretch parameter a must exceed 1")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.burn_in is not None and not 0 <= self.burn_in < self.steps:
            raise ValueError("burn_in must lie in [0, steps)")
        if self.thin is not None and self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass(frozen=True)
class EnsembleState:
    walkers: NDArray[np.float64]
    log_probs: NDArray[np.float64]
    rng_seed: int
    step_index: int = 0

    @property
    def n_walkers(self) -> int:
        return self.walkers.shape[0]

    @property
    def ndim(self) -> int:
        return self.walkers.shape[1]


@dataclass
class Chain:
    samples: NDArray[np.float64]  # (S, W, d)
    log_probs: NDArray[np.float64]  # (S, W)
    acceptance_count: int
    n_proposals: int
    meta: dict = field(default_factory=dict)

    @property
    def acceptance_fraction(self) -> float:
        return self.acceptance_count / self.n_proposals if self.n_proposals else 0.0

    @property
    def param_names(self) -> list[str]:
        d = self.samples.shape[-1]
        return list(self.meta.get("param_names", [f"x{i}" for i in range(d)]))

    def flat(self) -> NDArray[np.float64]:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def flat_log_probs(self) -> NDArray[np.float64]:
        return self.log_probs.reshape(-1)


def draw_stretch_factors(rng: np.random.Generator, a: float, size) -> NDArray[np.float64]:
    """Draw z from g(z) proportional to 1/sqrt(z) on [1/a, a] by inversion."""
    u = rng.random(size)
    return ((a - 1.0) * u + 1.0) ** 2 / a


def stretch_factor_cdf(z, a: float):
    z = np.clip(z, 1.0 / a, a)
    return (np.sqrt(z * a) - 1.0) / (a - 1.0)


def _evaluate(log_prob_fn, positions, vectorize, map_fn):
    if vectorize:
        return np.asarray(log_prob_fn(positions), dtype=float)
    mapper = map_fn if map_fn is not None else map
    return np.fromiter(mapper(log_prob_fn, list(positions)), dtype=float, count=len(positions))


def stretch_step(
    state: EnsembleState,
    log_prob_fn: Callable,
    a: float = 2.0,
    *,
    vectorize: bool = True,
    map_fn: Optional[Callable] = None,
) -> tuple[EnsembleState, int]:
    """Advance the ensemble one step; return the new state and accepted count.

    The two halves are updated in turn, each walker's partner drawn from the
    other (already updated) half.
    """
    rng = np.random.default_rng([state.rng_seed, state.step_index])
    x = state.walkers.copy()
    lp = state.log_probs.copy()
    n_walkers, ndim = x.shape
    half = n_walkers // 2
    halves = (np.arange(half), np.arange(half, n_walkers))
    accepted = 0
    for k in (0, 1):
        active, other = halves[k], halves[1 - k]
        z = draw_stretch_factors(rng, a, half)
        partners = other[rng.integers(0, half, size=half)]
        log_u = np.log(rng.random(half))

        proposal = x[partners] + z[:, None] * (x[active] - x[partners])
        lp_new = _evaluate(log_prob_fn, proposal, vectorize, map_fn)
        log_ratio = (ndim - 1) * np.log(z) + lp_new - lp[active]
        accept = np.isfinite(lp_new) & (log_u < log_ratio)
        x[active[accept]] = proposal[accept]
        lp[active[accept]] = lp_new[accept]
        accepted += int(np.count_nonzero(accept))
    return EnsembleState(x, lp, state.rng_seed, state.step_index + 1), accepted


def run_ensemble(
    log_prob_fn: Callable,
    initial: NDArray[np.float64],
    steps: int,
    seed: int,
    a: float = 2.0,
    *,
    vectorize: bool = True,
    map_fn: Optional[Callable] = None,
):
    """Run ``steps`` stretch steps; return ``(positions, log_probs, accepted)``."""
    initial = np.asarray(initial, dtype=float)
    lp0 = _evaluate(log_prob_fn, initial, vectorize, map_fn)
    if not np.all(np.isfinite(lp0)):
        raise ValueError("initial walkers must have finite log probability")
    state = EnsembleState(initial, lp0, int(seed), 0)
    positions = np.empty((steps,) + initial.shape)
    log_probs = np.empty((steps, initial.shape[0]))
    accepted = 0
    for s in range(steps):
        state, acc = stretch_step(state, log_prob_fn, a, vectorize=vectorize, map_fn=map_fn)
        positions[s] = state.walkers
        log_probs[s] = state.log_probs
        accepted += acc
    return positions, log_probs, accepted


def _autocorr_1d(x: NDArray[np.float64]) -> NDArray[np.float64]:
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    x = x - np.mean(x)
    f = np.fft.rfft(x, n=size)
    acf = np.fft.irfft(f * np.conjugate(f), n=size)[:n]
    return acf / acf[0]


def autocorrelation_time(chain, c: float = 5.0, min_length: int = 100) -> NDArray[np.float64]:
    """Integrated autocorrelation time per parameter.

    ``chain`` is a :class:`Chain` or an array shaped (steps, walkers, d). The
    autocorrelation function is averaged over walkers and summed up to the
    smallest window M with ``M >= c * tau(M)``, searched over the first half
    of the lags.
    """
    x = chain.samples if isinstance(chain, Chain) else np.asarray(chain, dtype=float)
    if x.ndim == 1:
        x = x[:, None, None]
    elif x.ndim == 2:
        x = x[:, :, None]
    n_steps = x.shape[0]
    if n_steps < min_length:
        raise ChainTooShortError(f"chain has {n_steps} steps, need at least {min_length}")
    taus = np.empty(x.shape[2])
    for j in range(x.shape[2]):
        series = x[:, :, j]
        if np.all(np.ptp(series, axis=0) == 0):
            raise DegenerateChainError(f"parameter {j} has zero variance")
        live = np.ptp(series, axis=0) > 0
        f = np.mean([_autocorr_1d(series[:, w]) for w in np.flatnonzero(live)], axis=0)
        # the biased ACF sums to zero over all lags, so only half the lags count
        tau_m = 2.0 * np.cumsum(f[: n_steps // 2]) - 1.0
        ok = np.arange(len(tau_m)) >= c * tau_m
        if not np.any(ok):
            raise ChainTooShortError(f"autocorrelation window criterion never met for parameter {j}")
        taus[j] = tau_m[np.argmax(ok)]
    return taus


def sample_ensemble(
    log_prob_fn: Callable,
    initial: NDArray[np.float64],
    settings: SamplerSettings,
    *,
    param_names: Optional[Sequence[str]] = None,
    vectorize: bool = True,
    map_fn: Optional[Callable] = None,
) -> Chain:
    """Run the sampler and return the burnt-in, thinned chain.

    Unset ``burn_in`` becomes ``max(1000, 10 tau)`` (capped at half the run)
    and unset ``thin`` becomes ``ceil(tau / 2)``, with ``tau`` estimated on the
    second half of the run.
    """
    positions, log_probs, accepted = run_ensemble(
        log_prob_fn, initial, settings.steps, settings.seed, settings.a,
        vectorize=vectorize, map_fn=map_fn,
    )
    steps = settings.steps
    issues: list[str] = []

    tau_guess = None
    if settings.burn_in is None or settings.thin is None:
        try:
            tau_guess = float(np.max(autocorrelation_time(positions[steps // 2:])))
        except (ChainTooShortError, DegenerateChainError) as exc:
            issues.append(f"autocorrelation estimate failed: {exc}")

    burn_in = settings.burn_in
    if burn_in is None:
        burn_in = max(1000, math.ceil(10 * tau_guess)) if tau_guess is not None else 1000
        if burn_in > steps // 2:
            burn_in = steps // 2
            issues.append(f"automatic burn-in capped at {burn_in} steps")
    thin = settings.thin
    if thin is None:
        thin = max(1, math.ceil(tau_guess / 2)) if tau_guess is not None else 1

    kept = positions[burn_in::thin]
    kept_lp = log_probs[burn_in::thin]

    tau = None
    try:
        tau = autocorrelation_time(positions[burn_in:])
    except (ChainTooShortError, DegenerateChainError) as exc:
        issues.append(f"autocorrelation estimate failed: {exc}")

    n_proposals = steps * settings.walkers
    fraction = accepted / n_proposals
    if fraction < 0.1 or fraction > 0.9:
        issues.append(f"acceptance fraction {fraction:.3f} outside [0.1, 0.9]")
    if tau is not None and steps < 50 * np.max(tau):
        issues.append(f"{steps} steps is fewer than 50 autocorrelation times ({np.max(tau):.1f})")
    for msg in issues:
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)

    d = initial.shape[1]
    meta = {
        "walkers": settings.walkers,
        "steps": steps,
        "a": settings.a,
        "seed": settings.seed,
        "burn_in": burn_in,
        "thin": thin,
        "param_names": list(param_names) if param_names is not None else [f"x{i}" for i in range(d)],
        "autocorr_time": None if tau is None else [float(t) for t in tau],
        "warnings": issues,
    }
    return Chain(kept, kept_lp, accepted, n_proposals, meta)


def param_names_for(n_max: int) -> list[str]:
    return ["log10_eta"] + [f"p{i}" for i in range(1, n_max + 1)]


def initialize_ensemble(
    data: Dataset,
    n_max: int,
    walkers: int,
    seed: int,
    prior: PriorSpec = PriorSpec(),
) -> EnsembleState:
    """Small Gaussian ball around a start derived from the low-flux slope.

    ``log_probs`` of the returned state are left as NaN; :func:`run_sampler`
    evaluates them.
    """
    ndim = 1 + n_max
    if walkers < 2 * ndim or walkers % 2:
        raise ValueError(f"need an even number of walkers >= {2 * ndim}")
    n = data.mean_photons
    y = data.p_click
    low = y < 0.1
    if np.count_nonzero(low) < 2:
        warnings.warn("fewer than 2 points with P < 0.1; using all points for the slope",
                      InsufficientDataWarning, stacklevel=2)
        low = np.ones_like(low)
    slope = float(np.sum(n[low] * y[low]) / np.sum(n[low] ** 2))

    p_start = 0.9 * np.arange(1, n_max + 1) / max(n_max, 1)
    p1 = p_start[0] if n_max else 1.0
    lo, hi = prior.log10_eta_bounds
    span = hi - lo
    log_eta = float(np.clip(np.log10(slope / p1), lo + 1e-3 * span, hi - 1e-3 * span))
    center = np.concatenate([[log_eta], p_start])

    rng = np.random.default_rng([int(seed), 0x1A17])
    scale = 1e-3 * np.where(center != 0, np.abs(center), 1.0)
    ball = center + scale * rng.standard_normal((walkers, ndim))
    ball[:, 0] = np.clip(ball[:, 0], lo, hi)
    ball[:, 1:] = np.sort(np.clip(ball[:, 1:], 0.0, 1.0), axis=1)
    return EnsembleState(ball, np.full(walkers, np.nan), int(seed), 0)


def run_sampler(
    data: Dataset,
    n_max: int,
    settings: SamplerSettings,
    prior: PriorSpec = PriorSpec(),
    *,
    map_fn: Optional[Callable] = None,
) -> Chain:
    """Sample the posterior of a detector model with ``n_max`` internal efficiencies.

    With ``map_fn`` (e.g. an executor's ``map``) walkers are evaluated one by
    one through it; otherwise a half-ensemble is evaluated in one vectorized call.
    """
    state = initialize_ensemble(data, n_max, settings.walkers, settings.seed, prior)
    if map_fn is None:
        def target(thetas):
            return log_posterior_batch(thetas, data, prior)
        vectorize = True
    else:
        def target(theta):
            return float(log_posterior_batch([theta], data, prior)[0])
        vectorize = False
    chain = sample_ensemble(
        target, state.walkers, settings,
        param_names=param_names_for(n_max), vectorize=vectorize, map_fn=map_fn,
    )
    chain.meta["n_max"] = n_max
    chain.meta["log10_eta_bounds"] = list(prior.log10_eta_bounds)
    chain.meta["monotone"] = prior.monotone
    return chain


def _linear_samples(chain: Chain) -> tuple[NDArray[np.float64], list[str]]:
    """Flattened samples with a leading ``log10_eta`` column mapped to ``eta``."""
    flat = chain.flat().copy()
    names = chain.param_names
    if names and names[0] == "log10_eta":
        flat[:, 0] = 10.0 ** flat[:, 0]
        names = ["eta"] + names[1:]
    return flat, names


@dataclass(frozen=True)
class PosteriorSummary:
    names: list[str]
    median: NDArray[np.float64]
    p16: NDArray[np.float64]
    p84: NDArray[np.float64]
    max_posterior: NDArray[np.float64]
    max_log_prob: float
    covariance: NDArray[np.float64]
    correlation: NDArray[np.float64]
    degenerate: bool

    def sigma(self) -> NDArray[np.float64]:
        """Half-width of the 16-84 percentile interval."""
        return 0.5 * (self.p84 - self.p16)


def summarize(chain: Chain) -> PosteriorSummary:
    flat, names = _linear_samples(chain)
    if flat.size == 0:
        raise ValueError("chain is empty")
    p16, median, p84 = np.percentile(flat, [16, 50, 84], axis=0)
    lps = chain.flat_log_probs()
    best = int(np.argmax(lps))
    cov = np.atleast_2d(np.cov(flat, rowvar=False))
    sd = np.sqrt(np.diag(cov))
    degenerate = bool(np.any(sd == 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = cov / np.outer(sd, sd)
    corr = np.where(np.outer(sd, sd) > 0, np.clip(corr, -1.0, 1.0), 0.0)
    np.fill_diagonal(corr, 1.0)
    return PosteriorSummary(names, median, p16, p84, flat[best], float(lps[best]), cov, corr, degenerate)


@dataclass
class CornerBundle:
    names: list[str]
    edges: list[NDArray[np.float64]]
    marginals: list[NDArray[np.int64]]
    joints: dict[tuple[int, int], NDArray[np.int64]]

    def write(self, directory) -> list[Path]:
        """One CSV per marginal and per parameter pair."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, e, h in zip(self.names, self.edges, self.marginals):
            path = directory / f"marginal_{name}.csv"
            rows = np.column_stack([e[:-1], e[1:], h])
            np.savetxt(path, rows, delimiter=",", fmt=["%.17g", "%.17g", "%d"],
                       header="bin_low,bin_high,count", comments="")
            written.append(path)
        for (i, j), h in self.joints.items():
            path = directory / f"joint_{self.names[i]}_{self.names[j]}.csv"
            ei, ej = self.edges[i], self.edges[j]
            ii, jj = np.meshgrid(np.arange(len(ei) - 1), np.arange(len(ej) - 1), indexing="ij")
            rows = np.column_stack([
                ei[ii.ravel()], ei[ii.ravel() + 1], ej[jj.ravel()], ej[jj.ravel() + 1], h.ravel(),
            ])
            np.savetxt(path, rows, delimiter=",", fmt=["%.17g"] * 4 + ["%d"],
                       header=f"{self.names[i]}_low,{self.names[i]}_high,"
                              f"{self.names[j]}_low,{self.names[j]}_high,count", comments="")
            written.append(path)
        return written


def corner_export(chain: Chain, bins: int = 30) -> CornerBundle:
    """1D and pairwise 2D histograms of the flattened chain on shared edges."""
    if bins < 10:
        raise ValueError("bins must be >= 10")
    flat, names = _linear_samples(chain)
    edges = []
    for col in flat.T:
        lo, hi = float(np.min(col)), float(np.max(col))
        if lo == hi:
            pad = 0.5 * abs(lo) if lo else 0.5
            lo, hi = lo - pad, hi + pad
        edges.append(np.linspace(lo, hi, bins + 1))
    marginals = [np.histogram(col, bins=e)[0] for col, e in zip(flat.T, edges)]
    joints = {}
    d = flat.shape[1]
    for i in range(d):
        for j in range(i + 1, d):
            h, _, _ = np.histogram2d(flat[:, i], flat[:, j], bins=[edges[i], edges[j]])
            joints[(i, j)] = h.astype(np.int64)
    return CornerBundle(names, edges, marginals, joints)


def write_chain(path, chain: Chain) -> None:
    """Tabular dump: ``step, walker, parameters..., log_prob`` plus header metadata."""
    path = Path(path)
    S, W, d = chain.samples.shape
    burn = chain.meta.get("burn_in", 0) or 0
    thin = chain.meta.get("thin", 1) or 1
    step = np.repeat(burn + thin * np.arange(S), W)
    walker = np.tile(np.arange(W), S)
    cols = ["step", "walker"] + chain.param_names + ["log_prob"]
    with open(path, "w") as fh:
        fh.write("# qdtomo chain\n")
        fh.write(f"# meta={json.dumps(chain.meta, sort_keys=True)}\n")
        fh.write(f"# acceptance_count={chain.acceptance_count}\n")
        fh.write(f"# n_proposals={chain.n_proposals}\n")
        fh.write(f"# shape={S},{W},{d}\n")
        fh.write(",".join(cols) + "\n")
        rows = np.column_stack([step, walker, chain.flat(), chain.flat_log_probs()])
        np.savetxt(fh, rows, delimiter=",", fmt=["%d", "%d"] + ["%.17g"] * (d + 1))


def read_chain(path) -> Chain:
    header = {}
    n_comment = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            n_comment += 1
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key] = value
    S, W, d = (int(v) for v in header["shape"].split(","))
    table = np.loadtxt(path, delimiter=",", skiprows=n_comment + 1, ndmin=2)
    if table.shape[0] != S * W:
        raise ValueError(f"chain file has {table.shape[0]} rows, expected {S * W}")
    samples = table[:, 2:2 + d].reshape(S, W, d)
    log_probs = table[:, 2 + d].reshape(S, W)
    return Chain(samples, log_probs, int(header["acceptance_count"]),
                 int(header["n_proposals"]), json.loads(header["meta"]))
