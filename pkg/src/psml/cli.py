"""Command-line front end.

Subcommands: simulate, estimate, study, bootstrap, r0. All results land
in files (CSV datasets, JSON fits and intervals, study report
directories); exit code 0 on success, 2 for configuration problems,
3 when the numerics fail.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .core import (
    DomainError,
    NumericalError,
    dataset_from_dict,
    dataset_to_dict,
    load_dataset,
    rng_stream,
    save_dataset,
    simulate_dataset,
)
from .likelihood import PenaltyConfig
from .models import MODEL_NAMES, make_model, r0_estimate
from .optimize import EstimationError, OptimizerConfig, maximize_psml
from .samplers import KINDS, SamplerSpec
from .study import STUDY_PRESETS, EpisodeSpec, StudyConfig, run_study
from .tune import TUNE_PRESETS, parametric_bootstrap, tune_lambda

_TAG_DATA = 10  # matches the study module's data-seed tag

# Per-model fallbacks for flags the user leaves unset.
_THETA_INIT = {
    "ou": (0.05, 0.5, 0.05),
    "lorenz63": (8.0, 25.0, 2.0, 1.0),
    "cwd-direct": (0.05, 0.3),
}
_RHO_INIT = {"aux-mbb": 0.8, "regularized": 0.5}


def _vector(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise DomainError(f"expected comma-separated numbers, got {text!r}") from exc


def _model_kwargs(args) -> dict:
    if args.model != "cwd-direct":
        return {}
    return {"additions": args.additions, "natural_mortality": args.mortality}


def _add_model_flags(sub):
    sub.add_argument("--model", required=True, choices=MODEL_NAMES)
    sub.add_argument("--additions", type=float, default=10.0,
                     help="cwd-direct only: animals added per unit time")
    sub.add_argument("--mortality", type=float, default=0.15,
                     help="cwd-direct only: background mortality rate")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    model = make_model(args.model, **_model_kwargs(args))
    preset = STUDY_PRESETS[args.model](seed=args.seed)
    theta = np.asarray(args.theta if args.theta else preset.theta0, dtype=float)
    model.validate_theta(theta)
    substeps = args.substeps if args.substeps else preset.data_substeps

    if args.x0 is not None:
        n = args.n if args.n else preset.episodes[0].n
        dt = args.dt if args.dt else preset.episodes[0].dt
        episodes = [(tuple(args.x0), n, dt)]
    else:
        episodes = [
            (ep.x0, args.n if args.n else ep.n, args.dt if args.dt else ep.dt)
            for ep in preset.episodes
        ]

    out = Path(args.out)
    paths = []
    for e, (x0, n, dt) in enumerate(episodes):
        if len(x0) != model.dim:
            raise DomainError(f"x0 must have {model.dim} coordinates")
        grid = EpisodeSpec(x0, n, dt).grid(substeps)
        ds = simulate_dataset(model, theta, np.asarray(x0), grid,
                              rng_stream(args.seed, _TAG_DATA, 0, e))
        if len(episodes) == 1:
            path = out
        else:
            path = out.with_name(f"{out.stem}-epi{e + 1}{out.suffix or '.csv'}")
        save_dataset(ds, path)
        paths.append(path)
    print("\n".join(str(p) for p in paths))
    return 0


# ---------------------------------------------------------------------------
# estimate


def _parse_lam(text: str):
    if text == "tune":
        return "tune"
    value = float(text)
    if value < 0:
        raise DomainError("lambda must be >= 0")
    return value


def _parse_rho(text):
    if text is None or text == "est":
        return text
    return float(text)


def cmd_estimate(args) -> int:
    model = make_model(args.model, **_model_kwargs(args))
    datasets = [load_dataset(p) for p in args.data]
    theta_init = tuple(args.theta_init) if args.theta_init else _THETA_INIT[args.model]

    rho = _parse_rho(args.rho)
    estimate_rho = rho == "est"
    spec_rho = None
    if args.sampler in _RHO_INIT:
        if rho is None:
            raise DomainError(
                f"sampler {args.sampler!r} needs --rho (a number or 'est')"
            )
        if estimate_rho:
            spec_rho = args.rho_init if args.rho_init is not None else _RHO_INIT[args.sampler]
        else:
            spec_rho = rho
    elif rho is not None:
        # The plain bridge is the rho = 1 member of the scaled family, so
        # accept that one value as an explicit no-op.
        if not (args.sampler == "mbb" and rho == 1.0):
            raise DomainError(f"sampler {args.sampler!r} takes no rho")
    sampler = SamplerSpec(args.sampler, spec_rho)

    lam = _parse_lam(args.lam)
    optimizer = OptimizerConfig(max_evals=args.max_evals)
    penalty = PenaltyConfig(
        lam=0.0 if lam == "tune" else lam,
        n_paths=args.n_paths,
        substeps=args.substeps,
        sampler=sampler,
    )

    start = time.perf_counter()
    if lam == "tune":
        result = tune_lambda(
            model, datasets, TUNE_PRESETS[args.model], penalty, theta_init,
            spec_rho, optimizer, seed=args.seed, estimate_rho=estimate_rho,
        )
        fit, fit_lam = result.fit, result.lam
    else:
        fit = maximize_psml(
            model, datasets, penalty, theta_init, spec_rho, optimizer,
            seed=args.seed, estimate_rho=estimate_rho,
        )
        fit_lam = lam
    elapsed = time.perf_counter() - start

    payload = {
        "model": {"name": args.model, "kwargs": _model_kwargs(args)},
        "dataset_paths": [str(p) for p in args.data],
        "datasets": [dataset_to_dict(ds) for ds in datasets],
        "config": {
            "sampler": {"kind": sampler.kind, "rho": sampler.rho},
            "n_paths": args.n_paths,
            "substeps": args.substeps,
            "lam": lam,
            "estimate_rho": estimate_rho,
            "theta_init": list(theta_init),
            "seed": args.seed,
            "max_evals": args.max_evals,
        },
        "estimate": {
            "theta": [float(v) for v in fit.theta],
            "rho": None if fit.rho is None else float(fit.rho),
            "lam": float(fit_lam),
            "loglik": float(fit.loglik),
            "objective": float(fit.objective),
            "evals": fit.evals,
            "converged": fit.converged,
        },
        "diagnostics": [
            {"dataset": d.dataset_index, "i": d.index, "log_phat": float(d.log_phat),
             "cv": float(d.cv), "ess": float(d.ess)}
            for d in fit.diagnostics
        ],
        "prediction_error": fit.prediction_error,
        "tune_trace": [
            {"lam": float(t.lam), "eps": float(t.eps), "accepted": bool(t.accepted)}
            for t in fit.tune_trace
        ],
        "timing_seconds": elapsed,
    }
    _write_json(args.out, payload)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise DomainError("give exactly one of --config or --preset")
    if args.config is not None:
        config = StudyConfig.from_json(Path(args.config).read_text())
        if args.replicates is not None or args.seed is not None:
            payload = config.to_dict()
            if args.replicates is not None:
                payload["n_replicates"] = args.replicates
            if args.seed is not None:
                payload["seed"] = args.seed
            config = StudyConfig.from_dict(payload)
    else:
        kwargs = {}
        if args.replicates is not None:
            kwargs["n_replicates"] = args.replicates
        if args.seed is not None:
            kwargs["seed"] = args.seed
        config = STUDY_PRESETS[args.preset](**kwargs)
    run_study(config, workers=args.threads, out_dir=args.out)
    print(str(Path(args.out) / "report.json"))
    return 0


# ---------------------------------------------------------------------------
# bootstrap


def cmd_bootstrap(args) -> int:
    fit = json.loads(Path(args.fit).read_text())
    try:
        model = make_model(fit["model"]["name"], **fit["model"].get("kwargs", {}))
        templates = [dataset_from_dict(d) for d in fit["datasets"]]
        cfg = fit["config"]
        estimate = fit["estimate"]
        sampler_kind = cfg["sampler"]["kind"]
        theta = np.asarray(estimate["theta"], dtype=float)
        rho = estimate["rho"]
        lam = float(estimate["lam"])
    except KeyError as exc:
        raise DomainError(f"fit file missing key {exc.args[0]!r}") from exc

    sampler = SamplerSpec(sampler_kind, rho)
    result = parametric_bootstrap(
        model, theta, rho, lam, templates, sampler,
        n_paths=int(cfg["n_paths"]), substeps=int(cfg["substeps"]),
        n_replicates=args.replicates, alpha=args.alpha,
        optimizer=OptimizerConfig(max_evals=int(cfg.get("max_evals", 1500))),
        seed=args.seed, estimate_rho=bool(cfg.get("estimate_rho", False)),
        data_substeps=args.data_substeps, workers=args.threads,
    )
    payload = {
        "source_fit": str(args.fit),
        "model": fit["model"],
        "estimate": estimate,
        "n_replicates": args.replicates,
        "alpha": args.alpha,
        "seed": args.seed,
        "replicates": [[float(v) for v in row] for row in result.replicates],
        "rho_replicates": None if result.rho_replicates is None
        else [float(v) for v in result.rho_replicates],
        "intervals": {
            name: [float(result.intervals[i, 0]), float(result.intervals[i, 1])]
            for i, name in enumerate(model.param_names)
        },
        "n_failed": result.n_failed,
    }
    _write_json(args.out, payload)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# r0


def cmd_r0(args) -> int:
    boot = json.loads(Path(args.boot).read_text())
    try:
        name = boot["model"]["name"]
        kwargs = boot["model"].get("kwargs", {})
        estimate = boot["estimate"]
        replicates = boot["replicates"]
    except KeyError as exc:
        raise DomainError(f"bootstrap file missing key {exc.args[0]!r}") from exc
    if name != "cwd-direct":
        raise DomainError("r0 is defined for the cwd-direct model only")
    if not replicates:
        raise DomainError("bootstrap file has no replicate estimates")
    model = make_model(name, **kwargs)
    m = model.natural_mortality
    beta_i = model.param_names.index("beta")
    mu_i = model.param_names.index("mu")
    draws = np.asarray(replicates, dtype=float)[:, [beta_i, mu_i]]
    theta = estimate["theta"]
    alpha = float(boot.get("alpha", 0.05))

    lines = ["n0,point,lower,upper"]
    for n0 in args.n0_grid:
        est = r0_estimate(theta[beta_i], theta[mu_i], m, n0, draws=draws, alpha=alpha)
        lines.append(f"{repr(float(n0))},{est.point!r},{est.lower!r},{est.upper!r}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psml",
        description="Simulated maximum likelihood for partially observed SDEs",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="simulate datasets from a model preset")
    _add_model_flags(sim)
    sim.add_argument("--theta", type=_vector, default=None,
                     help="generating parameters (default: model preset)")
    sim.add_argument("--x0", type=_vector, default=None,
                     help="initial state; overrides the preset episodes")
    sim.add_argument("--n", type=int, default=None, help="observations per dataset")
    sim.add_argument("--dt", type=float, default=None, help="observation spacing")
    sim.add_argument("--substeps", type=int, default=None,
                     help="fine simulation substeps per interval")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output CSV path")
    sim.set_defaults(func=cmd_simulate)

    est = subs.add_parser("estimate", help="fit a model to datasets")
    est.add_argument("data", nargs="+", help="dataset CSV paths")
    _add_model_flags(est)
    est.add_argument("--sampler", required=True, choices=KINDS)
    est.add_argument("--rho", default=None,
                     help="sampler parameter: a number or 'est'")
    est.add_argument("--rho-init", type=float, default=None,
                     help="starting value when rho is estimated")
    est.add_argument("--lambda", dest="lam", default="0",
                     help="penalty weight: a number or 'tune'")
    est.add_argument("-J", dest="n_paths", type=int, default=16,
                     help="importance-sample paths per transition")
    est.add_argument("-M", dest="substeps", type=int, default=8,
                     help="Euler substeps per observation interval")
    est.add_argument("--theta-init", type=_vector, default=None)
    est.add_argument("--max-evals", type=int, default=1500)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--out", required=True, help="output fit JSON path")
    est.set_defaults(func=cmd_estimate)

    study = subs.add_parser("study", help="run a replicated bias/RMSE study")
    study.add_argument("--config", default=None, help="study config JSON path")
    study.add_argument("--preset", default=None, choices=tuple(STUDY_PRESETS),
                       help="built-in desk-scale study")
    study.add_argument("--replicates", type=int, default=None)
    study.add_argument("--seed", type=int, default=None)
    study.add_argument("--threads", type=int, default=1)
    study.add_argument("--out", required=True, help="output directory")
    study.set_defaults(func=cmd_study)

    boot = subs.add_parser("bootstrap", help="parametric bootstrap from a fit")
    boot.add_argument("fit", help="fit JSON from the estimate command")
    boot.add_argument("-B", "--replicates", type=int, default=200)
    boot.add_argument("--alpha", type=float, default=0.05)
    boot.add_argument("--data-substeps", type=int, default=None,
                      help="substeps for replicate data simulation (default: fit's M)")
    boot.add_argument("--seed", type=int, default=0)
    boot.add_argument("--threads", type=int, default=1)
    boot.add_argument("--out", required=True, help="output JSON path")
    boot.set_defaults(func=cmd_bootstrap)

    r0 = subs.add_parser("r0", help="reproduction-number table from a bootstrap")
    r0.add_argument("boot", help="bootstrap JSON from the bootstrap command")
    r0.add_argument("--n0-grid", type=_vector, default=(25.0, 50.0, 75.0, 100.0),
                    help="comma-separated herd sizes")
    r0.add_argument("--out", required=True, help="output CSV path")
    r0.set_defaults(func=cmd_r0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
