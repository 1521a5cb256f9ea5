"""Sub-path proposals between consecutive observations.

Four families share one driver: blind forward simulation (pedersen),
the modified Brownian bridge pulled toward the next observation (mbb),
a convex blend of the two with a shrinking mixing matrix (regularized),
and the bridge with its covariance scaled by a free factor (aux-mbb).
Every proposal returns the log-density of the simulated sub-path under
the Euler target alongside the log-density under the proposal itself,
so the importance weight is a difference of accumulators.

The final substep is common to all families. The observed endpoint
coordinates are pinned to the observation, whose Euler marginal density
enters the target accumulator, and unobserved endpoint coordinates are
drawn from the Euler conditional given that observation, whose density
enters both accumulators (it cancels in the weight).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    DomainError,
    SdeModel,
    chol_mul,
    chol_spd,
    gauss_logpdf,
)

KINDS = ("pedersen", "mbb", "regularized", "aux-mbb")
_RHO_KINDS = ("regularized", "aux-mbb")

# Diagonal floor for the observed-block covariance entering bridge solves.
_OBS_BLOCK_FLOOR = 1e-14


@dataclass(frozen=True)
class SamplerSpec:
    """Proposal family plus its tuning parameter where the family has one.

    pedersen and mbb take no parameter; regularized takes rho in [0, 1]
    (0 recovers mbb in law); aux-mbb takes rho in (0, 1] (1 recovers mbb
    exactly, rho = 0 would degenerate the proposal and is rejected).
    """

    kind: str
    rho: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown sampler kind {self.kind!r}")
        if self.kind in _RHO_KINDS:
            if self.rho is None:
                raise DomainError(f"sampler {self.kind!r} requires rho")
            rho = float(self.rho)
            if self.kind == "aux-mbb" and not 0.0 < rho <= 1.0:
                raise DomainError("aux-mbb requires rho in (0, 1]")
            if self.kind == "regularized" and not 0.0 <= rho <= 1.0:
                raise DomainError("regularized requires rho in [0, 1]")
            object.__setattr__(self, "rho", rho)
        elif self.rho is not None:
            raise DomainError(f"sampler {self.kind!r} takes no rho")

    @property
    def has_rho(self) -> bool:
        return self.kind in _RHO_KINDS

    def with_rho(self, rho: float | None) -> "SamplerSpec":
        if not self.has_rho:
            if rho is not None:
                raise DomainError(f"sampler {self.kind!r} takes no rho")
            return self
        return replace(self, rho=rho)

    def to_json(self) -> str:
        payload = {"kind": self.kind}
        if self.rho is not None:
            payload["rho"] = float(self.rho)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SamplerSpec":
        payload = json.loads(text)
        if not isinstance(payload, dict) or "kind" not in payload:
            raise DomainError("sampler spec JSON must be an object with a 'kind'")
        extra = set(payload) - {"kind", "rho"}
        if extra:
            raise DomainError(f"unknown sampler spec keys {sorted(extra)}")
        return cls(payload["kind"], payload.get("rho"))


@dataclass
class SubPathBatch:
    """J simulated sub-paths plus their target and proposal log-densities.

    states has shape (substeps + 1, J, k); the first slice is the start
    states and the last has observed coordinates pinned to the observation.
    """

    states: np.ndarray
    log_target: np.ndarray
    log_proposal: np.ndarray

    @property
    def endpoints(self) -> np.ndarray:
        return self.states[-1]


def importance_weight(paths: SubPathBatch):
    """Per-path weights target/proposal; returns (weights, log_weights).

    Aggregation downstream should use the log form; the plain weights can
    overflow for extreme paths.
    """
    lw = paths.log_target - paths.log_proposal
    with np.errstate(over="ignore"):
        return np.exp(lw), lw


def _blend_weight(m: int, substeps: int, rho: float) -> float:
    """Mixing scalar pulling a regularized step from blind toward bridge."""
    left = substeps - m
    return left / (left + rho * (left - 1) ** 2)


def proposal_kernel(
    model: SdeModel,
    theta,
    x,
    y_obs,
    t: float,
    m: int,
    substeps: int,
    delta: float,
    spec: SamplerSpec,
):
    """Mean and covariance of the proposal for substep m (0-based, m <= substeps - 2).

    x may be one state (k,) or a batch (J, k); the return shapes follow,
    with the covariance batched only when the diffusion is state-dependent.
    """
    if not 0 <= m <= substeps - 2:
        raise DomainError("proposal_kernel covers intermediate substeps only")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y_obs = np.asarray(y_obs, dtype=float)
    xa = model.clamp_state(x)
    f = np.asarray(model.drift(xa, theta, t), dtype=float)
    outer = np.asarray(model.diffusion_outer(xa, theta, t), dtype=float)
    if outer.ndim == 2:
        outer_b = np.broadcast_to(outer, x.shape + (x.shape[-1],))
    else:
        outer_b = outer
    mean_e = x + f * delta
    cov_e = outer_b * delta
    if spec.kind == "pedersen":
        return mean_e, cov_e
    obs = np.asarray(model.observed, dtype=int)
    uno = np.asarray(model.unobserved, dtype=int)
    eta, sig = _bridge_moments(f, outer_b, x, y_obs, obs, uno, m, substeps, delta)
    mean_b = x + eta * delta
    cov_b = sig * delta
    if spec.kind == "mbb":
        return mean_b, cov_b
    if spec.kind == "aux-mbb":
        return mean_b, spec.rho * cov_b
    w = _blend_weight(m, substeps, spec.rho)
    return (1.0 - w) * mean_e + w * mean_b, (1.0 - w) * cov_e + w * cov_b


def _floor_obs_diag(mat: np.ndarray) -> np.ndarray:
    d = mat.shape[-1]
    i = np.arange(d)
    out = mat.copy()
    out[..., i, i] = np.maximum(out[..., i, i], _OBS_BLOCK_FLOOR)
    return out


def _bridge_moments(f, outer, x, y_obs, obs, uno, m, substeps, delta):
    """Bridge drift eta and covariance for substep m of the interval.

    The observed block of eta points straight at the observation over the
    remaining time; unobserved coordinates get the drift corrected by
    their covariance with the observed ones. The covariance shrinks the
    observed block by (r - 1)/r with r substeps remaining, and the
    unobserved block loses the explained part of its variance.
    """
    r = substeps - m
    frac = (r - 1) / r
    x_o = x[:, obs]
    eta = np.empty_like(x)
    eta[:, obs] = (y_obs[None, :] - x_o) / (delta * r)
    if uno.size == 0:
        return eta, frac * outer
    g_oo = outer[:, obs[:, None], obs[None, :]]
    g_ou = outer[:, obs[:, None], uno[None, :]]
    g_uo = outer[:, uno[:, None], obs[None, :]]
    g_uu = outer[:, uno[:, None], uno[None, :]]
    d_obs = y_obs[None, :] - (x_o + f[:, obs] * ((r - 1) * delta))
    solved = np.linalg.solve(_floor_obs_diag(g_oo), g_ou)  # G_oo^{-1} G_ou
    eta[:, uno] = f[:, uno] + np.einsum("jou,jo->ju", solved, d_obs) / (delta * r)
    sig = np.empty_like(outer)
    sig[:, uno[:, None], uno[None, :]] = g_uu - (g_uo @ solved) / r
    sig[:, uno[:, None], obs[None, :]] = frac * g_uo
    sig[:, obs[:, None], uno[None, :]] = frac * g_ou
    sig[:, obs[:, None], obs[None, :]] = frac * g_oo
    return eta, sig


def propose_transition(
    model: SdeModel,
    theta,
    starts: np.ndarray,
    y_obs,
    t_start: float,
    dt: float,
    substeps: int,
    spec: SamplerSpec,
    rng: np.random.Generator,
    _force_generic: bool = False,
) -> SubPathBatch:
    """Simulate J proposal sub-paths from starts toward the observation y_obs.

    starts is (J, k); y_obs carries the observed coordinates in the
    model's observed order. Draw consumption is fixed per substep, one
    (J, k) block for each intermediate substep and one (J, n_unobserved)
    block at the endpoint, so equal rng states give comparable paths
    across parameter values.
    """
    starts = np.asarray(starts, dtype=float)
    if starts.ndim != 2 or starts.shape[1] != model.dim:
        raise DomainError("starts must have shape (J, k)")
    y_obs = np.asarray(y_obs, dtype=float)
    if y_obs.shape != (len(model.observed),):
        raise DomainError("y_obs must carry one value per observed coordinate")
    if dt <= 0:
        raise DomainError("interval length must be positive")
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    fully_observed = len(model.observed) == model.dim
    if fully_observed and model.constant_diffusion and not _force_generic:
        return _propose_scalar_cov(model, theta, starts, y_obs, t_start, dt, substeps, spec, rng)
    return _propose_generic(model, theta, starts, y_obs, t_start, dt, substeps, spec, rng)


def _propose_scalar_cov(model, theta, starts, y_obs, t_start, dt, substeps, spec, rng):
    """Driver for fully observed models with state-independent diffusion.

    Every kernel covariance is then a scalar multiple of the one Euler
    covariance, so a single factorization per transition serves all
    substeps and families.
    """
    n_paths, k = starts.shape
    delta = dt / substeps
    outer = np.asarray(model.diffusion_outer(starts[:1], theta, t_start), dtype=float)
    chol_e = chol_spd(outer * delta)
    states = np.empty((substeps + 1, n_paths, k))
    states[0] = starts
    log_t = np.zeros(n_paths)
    log_p = np.zeros(n_paths)
    kind = spec.kind
    x = starts
    for m in range(substeps - 1):
        t_m = t_start + m * delta
        xa = model.clamp_state(x)
        f = np.asarray(model.drift(xa, theta, t_m), dtype=float)
        mean_e = x + f * delta
        r = substeps - m
        frac = (r - 1) / r
        if kind == "pedersen":
            q_mean, c = mean_e, 1.0
        else:
            mean_b = x + (y_obs[None, :] - x) / r
            if kind == "mbb":
                q_mean, c = mean_b, frac
            elif kind == "aux-mbb":
                q_mean, c = mean_b, spec.rho * frac
            else:
                w = _blend_weight(m, substeps, spec.rho)
                q_mean = (1.0 - w) * mean_e + w * mean_b
                c = (1.0 - w) + w * frac
        z = rng.standard_normal((n_paths, k))
        x_next = q_mean + math.sqrt(c) * (z @ chol_e.T)
        if kind == "pedersen":
            dens = gauss_logpdf(x_next - mean_e, chol_e)
            log_t += dens
            log_p += dens
        else:
            log_p += gauss_logpdf(x_next - q_mean, chol_e, scale=c)
            log_t += gauss_logpdf(x_next - mean_e, chol_e)
        x = x_next
        states[m + 1] = x
    # endpoint: fully observed, so the state is pinned to the observation
    t_m = t_start + (substeps - 1) * delta
    xa = model.clamp_state(x)
    f = np.asarray(model.drift(xa, theta, t_m), dtype=float)
    log_t += gauss_logpdf(y_obs[None, :] - (x + f * delta), chol_e)
    end = np.empty((n_paths, k))
    end[:, list(model.observed)] = y_obs
    states[substeps] = end
    return SubPathBatch(states, log_t, log_p)


def _propose_generic(model, theta, starts, y_obs, t_start, dt, substeps, spec, rng):
    n_paths, k = starts.shape
    delta = dt / substeps
    obs = np.asarray(model.observed, dtype=int)
    uno = np.asarray(model.unobserved, dtype=int)
    kind = spec.kind
    states = np.empty((substeps + 1, n_paths, k))
    states[0] = starts
    log_t = np.zeros(n_paths)
    log_p = np.zeros(n_paths)
    x = starts
    for m in range(substeps - 1):
        t_m = t_start + m * delta
        xa = model.clamp_state(x)
        f = np.asarray(model.drift(xa, theta, t_m), dtype=float)
        outer = np.asarray(model.diffusion_outer(xa, theta, t_m), dtype=float)
        if outer.ndim == 2:
            outer = np.broadcast_to(outer, (n_paths, k, k))
        mean_e = x + f * delta
        cov_e = outer * delta
        if kind == "pedersen":
            chol_e = chol_spd(cov_e)
            z = rng.standard_normal((n_paths, k))
            x_next = mean_e + chol_mul(chol_e, z)
            dens = gauss_logpdf(x_next - mean_e, chol_e)
            log_t += dens
            log_p += dens
        else:
            eta, sig = _bridge_moments(f, outer, x, y_obs, obs, uno, m, substeps, delta)
            mean_b = x + eta * delta
            cov_b = sig * delta
            if kind == "mbb":
                q_mean, q_cov = mean_b, cov_b
            elif kind == "aux-mbb":
                q_mean, q_cov = mean_b, spec.rho * cov_b
            else:
                w = _blend_weight(m, substeps, spec.rho)
                q_mean = (1.0 - w) * mean_e + w * mean_b
                q_cov = (1.0 - w) * cov_e + w * cov_b
            chol_q = chol_spd(q_cov)
            z = rng.standard_normal((n_paths, k))
            x_next = q_mean + chol_mul(chol_q, z)
            log_p += gauss_logpdf(x_next - q_mean, chol_q)
            log_t += gauss_logpdf(x_next - mean_e, chol_spd(cov_e))
        x = x_next
        states[m + 1] = x
    # endpoint substep: pin observed coordinates, draw the unobserved rest
    t_m = t_start + (substeps - 1) * delta
    xa = model.clamp_state(x)
    f = np.asarray(model.drift(xa, theta, t_m), dtype=float)
    outer = np.asarray(model.diffusion_outer(xa, theta, t_m), dtype=float)
    if outer.ndim == 2:
        outer = np.broadcast_to(outer, (n_paths, k, k))
    mean_e = x + f * delta
    cov_e = outer * delta
    end = np.empty((n_paths, k))
    end[:, obs] = y_obs
    if uno.size == 0:
        log_t += gauss_logpdf(y_obs[None, :] - mean_e, chol_spd(cov_e))
    else:
        s_oo = _floor_obs_diag(cov_e[:, obs[:, None], obs[None, :]])
        s_ou = cov_e[:, obs[:, None], uno[None, :]]
        s_uo = cov_e[:, uno[:, None], obs[None, :]]
        s_uu = cov_e[:, uno[:, None], uno[None, :]]
        diff_o = y_obs[None, :] - mean_e[:, obs]
        log_t += gauss_logpdf(diff_o, chol_spd(s_oo))
        solved = np.linalg.solve(s_oo, s_ou)  # S_oo^{-1} S_ou
        c_mean = mean_e[:, uno] + np.einsum("jou,jo->ju", solved, diff_o)
        c_cov = s_uu - s_uo @ solved
        chol_c = chol_spd(c_cov)
        z = rng.standard_normal((n_paths, uno.size))
        x_u = c_mean + chol_mul(chol_c, z)
        dens = gauss_logpdf(x_u - c_mean, chol_c)
        log_t += dens
        log_p += dens
        end[:, uno] = x_u
    states[substeps] = end
    return SubPathBatch(states, log_t, log_p)


# Named entry points, one per family.


def pedersen_propose(model, theta, starts, y_obs, t_start, dt, substeps, rng):
    return propose_transition(
        model, theta, starts, y_obs, t_start, dt, substeps, SamplerSpec("pedersen"), rng
    )


def mbb_propose(model, theta, starts, y_obs, t_start, dt, substeps, rng):
    return propose_transition(
        model, theta, starts, y_obs, t_start, dt, substeps, SamplerSpec("mbb"), rng
    )


def regularized_propose(model, theta, starts, y_obs, t_start, dt, substeps, rho, rng):
    return propose_transition(
        model, theta, starts, y_obs, t_start, dt, substeps, SamplerSpec("regularized", rho), rng
    )


def aux_mbb_propose(model, theta, starts, y_obs, t_start, dt, substeps, rho, rng):
    return propose_transition(
        model, theta, starts, y_obs, t_start, dt, substeps, SamplerSpec("aux-mbb", rho), rng
    )
