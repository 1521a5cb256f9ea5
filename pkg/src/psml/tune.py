"""Penalty-weight selection and parametric-bootstrap intervals.

The penalty weight lambda is chosen by a ladder search on the estimated
prediction error: fit at the current lambda, then probe one step down
(and, if the very first probe fails, one step up) for as long as each
accepted move improves the error by more than a threshold. Prediction
error is the mean Euclidean distance between observed data and
replicate simulations from the fitted parameters.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import (
    Dataset,
    DomainError,
    NumericalError,
    derive_seed,
    rng_stream,
    simulate_dataset,
    simulate_paths_batch,
)
from .likelihood import PenaltyConfig
from .optimize import EstimationError, OptimizerConfig, PsmlFit, maximize_psml

# Sub-seed tags so every consumer of a tune/bootstrap seed gets its own stream.
_TAG_OBJECTIVE = 0
_TAG_PREDICTION = 1
_TAG_BOOT_DATA = 2
_TAG_BOOT_FIT = 3


@dataclass(frozen=True)
class TuneConfig:
    """Ladder settings: start, stop threshold, step sizes, simulation count."""

    eps0: float
    delta_eps: float
    lambda0: float = 0.5
    delta_lambda: float = 0.025
    n_sims: int = 1000
    max_steps: int = 200

    def __post_init__(self):
        if self.eps0 <= 0 or self.delta_eps <= 0:
            raise DomainError("eps0 and delta_eps must be positive")
        if self.lambda0 < 0 or self.delta_lambda <= 0:
            raise DomainError("lambda0 must be >= 0 and delta_lambda > 0")
        if self.n_sims < 1 or self.max_steps < 1:
            raise DomainError("n_sims and max_steps must be positive")


TUNE_PRESETS = {
    "ou": TuneConfig(eps0=0.04, delta_eps=0.001),
    "lorenz63": TuneConfig(eps0=3.5, delta_eps=0.1),
    "cwd-direct": TuneConfig(eps0=5.0, delta_eps=0.5),
}


@dataclass(frozen=True)
class TraceEntry:
    lam: float
    eps: float
    accepted: bool


@dataclass
class TuneResult:
    lam: float
    fit: PsmlFit
    trace: list


def prediction_error(model, theta, datasets, substeps, n_sims, rng) -> float:
    """Mean distance between observations and replicate simulations.

    Simulates n_sims paths from each dataset's initial condition over its
    grid and averages the Euclidean distance over observed coordinates,
    across all observation times, datasets, and replicates.
    """
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    obs = list(model.observed)
    total = 0.0
    n_total = 0
    for ds in datasets:
        grid = ds.grid(substeps)
        sims = simulate_paths_batch(model, theta, ds.x0, grid, n_sims, rng)
        diffs = sims[:, :, obs] - ds.values[:, None, :]
        total += float(np.linalg.norm(diffs, axis=-1).sum())
        n_total += ds.n
    return total / (n_total * n_sims)


def run_lambda_ladder(
    evaluate: Callable[[float, PsmlFit | None], tuple[PsmlFit, float]],
    config: TuneConfig,
) -> TuneResult:
    """Drive the ladder over lambda given an evaluate(lam, warm_fit) callback.

    The callback fits at one lambda (optionally warm-started) and returns
    (fit, prediction error). The ladder starts at lambda0, stops as soon
    as the error beats eps0, otherwise walks down in delta_lambda steps
    while each move improves the error by more than delta_eps. If the
    very first downward probe is rejected it walks up instead, under the
    same improvement rule. lambda is clamped at 0 and never negative.
    """
    lam = config.lambda0
    fit, eps = evaluate(lam, None)
    trace = [TraceEntry(lam, eps, True)]
    if eps < config.eps0:
        return TuneResult(lam, fit, trace)

    moved_down = False
    steps = 0
    while steps < config.max_steps:
        steps += 1
        probe = max(lam - config.delta_lambda, 0.0)
        if probe == lam:
            break  # already at the clamp
        fit_p, eps_p = evaluate(probe, fit)
        improved = eps - eps_p > config.delta_eps
        trace.append(TraceEntry(probe, eps_p, improved))
        if not improved:
            break
        lam, fit, eps = probe, fit_p, eps_p
        moved_down = True
        if eps < config.eps0 or lam == 0.0:
            return TuneResult(lam, fit, trace)

    if moved_down:
        return TuneResult(lam, fit, trace)

    if eps < config.eps0:
        return TuneResult(lam, fit, trace)
    steps = 0
    while steps < config.max_steps:
        steps += 1
        probe = lam + config.delta_lambda
        fit_p, eps_p = evaluate(probe, fit)
        improved = eps - eps_p > config.delta_eps
        trace.append(TraceEntry(probe, eps_p, improved))
        if not improved:
            break
        lam, fit, eps = probe, fit_p, eps_p
        if eps < config.eps0:
            break
    return TuneResult(lam, fit, trace)


def tune_lambda(
    model,
    datasets,
    tune_config: TuneConfig,
    penalty: PenaltyConfig,
    theta_init,
    rho_init: float | None = None,
    optimizer: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    estimate_rho: bool | None = None,
) -> TuneResult:
    """Select lambda for one dataset collection by the ladder rule.

    Fits share one objective seed (common random numbers across lambda)
    and the prediction-error simulations share another, so error
    comparisons between lambda values are paired. Later fits warm-start
    at the previously accepted estimate.
    """
    obj_seed = derive_seed(seed, _TAG_OBJECTIVE)
    pred_seed = derive_seed(seed, _TAG_PREDICTION)

    def evaluate(lam: float, warm: PsmlFit | None):
        cfg = replace(penalty, lam=lam)
        th0 = warm.theta if warm is not None else theta_init
        r0 = warm.rho if warm is not None and warm.rho is not None else rho_init
        fit = maximize_psml(
            model, datasets, cfg, th0, r0, optimizer, seed=obj_seed, estimate_rho=estimate_rho
        )
        eps = prediction_error(
            model, fit.theta, datasets, penalty.substeps, tune_config.n_sims,
            rng_stream(pred_seed),
        )
        fit.prediction_error = eps
        return fit, eps

    result = run_lambda_ladder(evaluate, tune_config)
    result.fit.tune_trace = result.trace
    return result


# ---------------------------------------------------------------------------
# Parametric bootstrap


@dataclass
class BootstrapResult:
    replicates: np.ndarray  # (n_ok, p) parameter estimates
    rho_replicates: np.ndarray | None
    intervals: np.ndarray  # (p, 2) empirical quantile bands
    alpha: float
    n_failed: int


def _bootstrap_one(payload):
    (model, theta, rho, lam, templates, sampler, n_paths, substeps,
     optimizer, seed, b, estimate_rho, data_substeps) = payload
    sims = [
        simulate_dataset(
            model, theta, t.x0, t.grid(data_substeps), rng_stream(seed, _TAG_BOOT_DATA, b, j)
        )
        for j, t in enumerate(templates)
    ]
    cfg = PenaltyConfig(lam=lam, n_paths=n_paths, substeps=substeps, sampler=sampler)
    fit = maximize_psml(
        model, sims, cfg, theta, rho, optimizer,
        seed=derive_seed(seed, _TAG_BOOT_FIT, b), estimate_rho=estimate_rho,
    )
    return fit.theta, fit.rho


def parametric_bootstrap(
    model,
    theta,
    rho: float | None,
    lam: float,
    templates,
    sampler,
    n_paths: int,
    substeps: int,
    n_replicates: int = 200,
    alpha: float = 0.05,
    optimizer: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    estimate_rho: bool | None = None,
    data_substeps: int | None = None,
    workers: int = 1,
    estimate=None,
) -> BootstrapResult:
    """Quantile intervals from refitting simulated replicates of the data.

    Each replicate simulates every template dataset at the fitted theta
    and re-estimates with the tuned lambda held fixed, warm-started at
    the original estimate. More than 10% failed replicates aborts.
    The ``estimate`` hook replaces the refit (testing seam).
    """
    if not 0.0 < alpha <= 1.0:
        raise DomainError("alpha must lie in (0, 1]")
    if n_replicates < 2:
        raise DomainError("need at least 2 bootstrap replicates")
    if isinstance(templates, Dataset):
        templates = [templates]
    templates = list(templates)
    data_substeps = substeps if data_substeps is None else data_substeps

    thetas = []
    rhos = []
    n_failed = 0
    if estimate is not None:
        for b in range(n_replicates):
            sims = [
                simulate_dataset(
                    model, theta, t.x0, t.grid(data_substeps),
                    rng_stream(seed, _TAG_BOOT_DATA, b, j),
                )
                for j, t in enumerate(templates)
            ]
            try:
                th, rh = estimate(sims, b)
            except (EstimationError, NumericalError):
                n_failed += 1
                continue
            thetas.append(np.asarray(th, dtype=float))
            rhos.append(rh)
    else:
        payloads = [
            (model, np.asarray(theta, float), rho, float(lam), templates, sampler,
             n_paths, substeps, optimizer, seed, b, estimate_rho, data_substeps)
            for b in range(n_replicates)
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = []
                for fut in [pool.submit(_bootstrap_one, p) for p in payloads]:
                    try:
                        outcomes.append(fut.result())
                    except (EstimationError, NumericalError):
                        outcomes.append(None)
        else:
            outcomes = []
            for p in payloads:
                try:
                    outcomes.append(_bootstrap_one(p))
                except (EstimationError, NumericalError):
                    outcomes.append(None)
        for out in outcomes:
            if out is None:
                n_failed += 1
            else:
                thetas.append(out[0])
                rhos.append(out[1])

    if n_failed > 0.1 * n_replicates:
        raise EstimationError(
            f"{n_failed} of {n_replicates} bootstrap replicates failed"
        )
    reps = np.asarray(thetas)
    intervals = np.quantile(reps, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0).T
    rho_reps = None
    if any(r is not None for r in rhos):
        rho_reps = np.asarray([float(r) for r in rhos])
    return BootstrapResult(reps, rho_reps, intervals, alpha, n_failed)
