"""Chained importance estimates of the observation likelihood.

Each inter-observation transition is estimated by J weighted proposal
paths; the endpoint's unobserved coordinates, weighted by the
self-normalized importance weights, form the particle cloud that seeds
the next transition. The penalized objective subtracts the summed weight
coefficient of variation, scaled by the penalty weight lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, DomainError, NumericalError, SdeModel, derive_seed, rng_stream
from .samplers import SamplerSpec, SubPathBatch, importance_weight, propose_transition

# Per-path log-weights at or below this are treated as vanished.
_LOG_WEIGHT_FLOOR = -700.0


class TransitionFailure(NumericalError):
    """All importance weights of one transition vanished or went non-finite."""

    def __init__(self, message, dataset_index=0, index=0):
        super().__init__(message)
        self.dataset_index = dataset_index
        self.index = index


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted values of the unobserved coordinates at one observation time."""

    particles: np.ndarray  # (n_particles, n_unobserved)
    weights: np.ndarray

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if particles.ndim != 2 or weights.shape != (particles.shape[0],):
            raise DomainError("cloud needs (n, d) particles and (n,) weights")
        if particles.shape[0] < 1:
            raise DomainError("cloud must hold at least one particle")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be non-negative and sum to one")
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point_mass(cls, values) -> "ParticleCloud":
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(values[None, :], np.array([1.0]))

    def resample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n multinomial draws from the cloud; skips rng use when empty-width."""
        if self.particles.shape[1] == 0:
            return np.empty((n, 0))
        u = rng.random(n)
        idx = np.searchsorted(np.cumsum(self.weights), u, side="right")
        idx = np.minimum(idx, self.particles.shape[0] - 1)
        return self.particles[idx]


@dataclass(frozen=True)
class TransitionEstimate:
    log_density: float
    cv: float
    ess: float


@dataclass(frozen=True)
class TransitionDiag:
    """Per-transition diagnostics, exported as {i, log_phat, cv, ess}."""

    dataset_index: int
    index: int
    log_phat: float
    cv: float
    ess: float


@dataclass
class LikelihoodResult:
    loglik: float
    diagnostics: list
    failed: bool = False

    @property
    def cv_sum(self) -> float:
        return float(sum(d.cv for d in self.diagnostics))


@dataclass(frozen=True)
class PenaltyConfig:
    """Estimation configuration: penalty weight, path count, substeps, family."""

    lam: float
    n_paths: int
    substeps: int
    sampler: SamplerSpec

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise DomainError("lambda must be >= 0")
        if self.n_paths < 2:
            raise DomainError("need at least 2 paths per transition")
        if self.substeps < 1:
            raise DomainError("substeps must be >= 1")


def weight_cv(log_weights: np.ndarray) -> float:
    """Coefficient of variation of the weights, sample sd over mean.

    Computed on max-shifted weights, which leaves the ratio unchanged and
    avoids overflow. Uses the (J - 1) denominator.
    """
    lw = np.asarray(log_weights, dtype=float)
    shift = np.max(lw)
    if not np.isfinite(shift):
        return math.inf
    w = np.exp(lw - shift)
    mean = w.mean()
    if mean <= 0:
        return math.inf
    return float(w.std(ddof=1) / mean)


def effective_sample_size(cvs: Sequence[float], n_paths: int) -> float:
    """Paths discounted by weight variability, J / (1 + mean cv^2)."""
    cvs = np.asarray(cvs, dtype=float)
    if cvs.size == 0:
        raise DomainError("need at least one cv")
    if np.any(cvs < 0):
        raise DomainError("cv values must be non-negative")
    return float(n_paths / (1.0 + np.mean(cvs**2)))


def transition_estimate(
    model: SdeModel,
    theta,
    cloud: ParticleCloud,
    start_obs,
    y_obs,
    t_start: float,
    dt: float,
    n_paths: int,
    substeps: int,
    sampler: SamplerSpec,
    rng: np.random.Generator,
):
    """Estimate one transition density and advance the particle cloud.

    Start states combine the known observed coordinates at the interval
    start with a multinomial resample of the cloud for the unobserved
    ones. Returns (TransitionEstimate, next cloud).
    """
    k = model.dim
    obs = list(model.observed)
    uno = list(model.unobserved)
    starts = np.empty((n_paths, k))
    starts[:, obs] = np.asarray(start_obs, dtype=float)
    starts[:, uno] = cloud.resample(n_paths, rng)
    paths = propose_transition(
        model, theta, starts, y_obs, t_start, dt, substeps, sampler, rng
    )
    _, lw = importance_weight(paths)
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    shift = np.max(lw)
    if not np.isfinite(shift) or shift <= _LOG_WEIGHT_FLOOR:
        raise TransitionFailure("all importance weights vanished")
    w = np.exp(lw - shift)
    mean_w = w.mean()
    log_phat = shift + math.log(mean_w)
    cv = float(w.std(ddof=1) / mean_w)
    ess = effective_sample_size([cv], n_paths)
    est = TransitionEstimate(float(log_phat), cv, ess)
    if uno:
        next_cloud = ParticleCloud(paths.endpoints[:, uno], w / w.sum())
    else:
        next_cloud = ParticleCloud(np.empty((n_paths, 0)), np.full(n_paths, 1.0 / n_paths))
    return est, next_cloud


def _as_datasets(datasets) -> list:
    if isinstance(datasets, Dataset):
        return [datasets]
    out = list(datasets)
    if not out:
        raise DomainError("need at least one dataset")
    return out


def log_likelihood(
    model: SdeModel,
    theta,
    datasets,
    n_paths: int,
    substeps: int,
    sampler: SamplerSpec,
    seed: int,
    on_failure: str = "raise",
) -> LikelihoodResult:
    """Simulated log-likelihood chained over all transitions of all datasets.

    Each dataset d gets the derived seed (seed, d), and transition i of
    that dataset draws from the stream (dataset seed, i), so the joint
    value over several datasets equals the sum of single-dataset runs and
    draws never depend on theta. on_failure selects between raising a
    TransitionFailure and returning -inf with the partial diagnostics.
    """
    if on_failure not in ("raise", "neginf"):
        raise DomainError("on_failure must be 'raise' or 'neginf'")
    theta = model.validate_theta(theta)
    total = 0.0
    diags = []
    for d_idx, ds in enumerate(_as_datasets(datasets)):
        if tuple(ds.observed) != tuple(model.observed):
            raise DomainError("dataset observed coordinates do not match the model")
        dseed = derive_seed(seed, d_idx)
        grid = ds.grid(substeps)
        uno = list(model.unobserved)
        cloud = ParticleCloud.point_mass(ds.x0[uno]) if uno else ParticleCloud(
            np.empty((1, 0)), np.array([1.0])
        )
        prev_obs = ds.x0[list(model.observed)]
        for i in range(ds.n):
            t_start, dt = grid.interval(i)
            rng = rng_stream(dseed, i)
            try:
                est, cloud = transition_estimate(
                    model, theta, cloud, prev_obs, ds.values[i], t_start, dt,
                    n_paths, substeps, sampler, rng,
                )
            except (TransitionFailure, NumericalError) as exc:
                if on_failure == "raise":
                    raise TransitionFailure(
                        f"transition {i} of dataset {d_idx} failed: {exc}",
                        dataset_index=d_idx,
                        index=i,
                    ) from exc
                return LikelihoodResult(-math.inf, diags, failed=True)
            diags.append(TransitionDiag(d_idx, i, est.log_density, est.cv, est.ess))
            total += est.log_density
            prev_obs = ds.values[i]
    return LikelihoodResult(float(total), diags)


def penalized_log_likelihood(
    model: SdeModel,
    theta,
    rho: float | None,
    datasets,
    config: PenaltyConfig,
    seed: int,
    on_failure: str = "raise",
):
    """Objective value log-likelihood minus lambda times the summed weight cv.

    rho overrides the sampler parameter for families that have one; pass
    None to keep the configured value. Returns (value, LikelihoodResult).
    """
    sampler = config.sampler
    if rho is not None:
        sampler = sampler.with_rho(rho)
    res = log_likelihood(
        model, theta, datasets, config.n_paths, config.substeps, sampler, seed, on_failure
    )
    if res.failed:
        return -math.inf, res
    return res.loglik - config.lam * res.cv_sum, res
