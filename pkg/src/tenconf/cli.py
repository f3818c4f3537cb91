"""Command-line pipeline: simulate | fit | complete | conformal | evaluate | experiment.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every subcommand echoes its effective configuration into the output
directory so a run can be reproduced from the echo alone.

The split seed couples the pipeline stages: `complete` must see only the
training split that `conformal` later excludes from calibration, so both
commands must receive the same --q/--split-seed pair (the `experiment`
command wires this internally).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .completion import CompletionOptions, tucker_complete, tucker_tangent_norms
from .conformal import (
    ScoreFunction,
    calibration_weights,
    conformal_intervals,
    split_observed,
    write_intervals_csv,
)
from .missingness import PropensityModel
from .rgrad import NumericalError, RGradConfig, fit_mple, rank_select, write_trace_csv
from .simulation import (
    ExperimentConfig,
    draw_masks,
    gen_block_param,
    gen_noise,
    gen_signal,
    run_experiment,
)
from .simulation_metrics import empirical_coverage, mean_finite_width, miscoverage
from .seeding import derive_seed
from .tensor_core import DataError, read_dten, write_dten, write_json
from .tt import load_tt, save_tt, tt_full


def _parse_rank(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise DataError(f"cannot parse rank {text!r}; expected comma-separated integers") from exc


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, name: str, payload: dict) -> None:
    write_json(payload, out / name)


def _load_observed(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (values, observed) from either a data or a ±1 mask tensor."""
    x = read_dten(path)
    finite = x[~np.isnan(x)]
    if finite.size and np.all(np.abs(finite) == 1.0) and not np.isnan(x).any():
        return x, x > 0
    return x, ~np.isnan(x)


def cmd_simulate(args) -> int:
    out = _outdir(args)
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    overrides = {
        k: v
        for k, v in (
            ("d", args.d), ("r", args.r), ("theta", args.theta), ("noise", args.noise),
            ("snr", args.snr), ("q", args.q), ("reps", args.reps), ("seed", args.seed),
        )
        if v is not None
    }
    if overrides:
        cfg = replace(cfg, **overrides)
    model = PropensityModel(theta=cfg.theta, q=cfg.q)
    b_star = gen_block_param(cfg.d, cfg.r, derive_seed(cfg.seed, 0))
    x_star = gen_signal(cfg.d, derive_seed(cfg.seed, 1))
    masks = draw_masks(b_star, model, cfg)
    write_dten(b_star, out / "b_star.dten")
    write_dten(x_star, out / "x_star.dten")
    for i, m in enumerate(masks):
        write_dten(m, out / f"mask_{i:03d}.dten")
    noise = gen_noise(x_star, b_star, cfg.noise, cfg.snr, derive_seed(cfg.seed, 0, 3))
    x = np.where(masks[0] > 0, x_star + noise, np.nan)
    write_dten(x, out / "x.dten")
    _echo_config(out, "simulate_config.json", cfg.to_dict())
    print(f"wrote b_star.dten, x_star.dten, x.dten and {len(masks)} masks to {out}")
    return 0


def cmd_fit(args) -> int:
    out = _outdir(args)
    _, observed = _load_observed(args.input)
    seed = args.seed if args.seed is not None else 0
    split = split_observed(np.where(observed, 1.0, -1.0), args.q, args.split_seed)
    w_tr = split.train_sign()
    model = PropensityModel(theta=args.theta, q=args.q)

    echo = {
        "input": str(args.input), "theta": args.theta, "h": args.h, "q": args.q,
        "split_seed": args.split_seed, "seed": seed, "step": args.step,
        "tol": args.tol, "l_max": args.l_max, "init_sigma": args.init_sigma,
        "rank": args.rank, "rank_select": args.rank_select, "candidates": args.candidates,
    }
    _echo_config(out, "fit_config.json", echo)

    if args.rank_select:
        candidates = _parse_rank(args.candidates) if args.candidates else None
        if candidates is None:
            d_min = min(observed.shape)
            candidates = tuple(range(2, min(9, max(2, d_min // 4)) + 1))
        cfg = RGradConfig(
            rank=(candidates[0],) * (observed.ndim - 1), step=args.step, tol=args.tol,
            l_max=args.l_max, init_sigma=args.init_sigma, seed=seed,
        )
        sel = rank_select(w_tr, model, candidates, f"P-{args.rank_select.upper()}", cfg,
                          n_jobs=args.threads)
        fit = sel.best_fit
        write_json({"selected_rank": sel.best, "table": sel.table}, out / "rank_selection.json")
        print(f"selected rank {sel.best} by P-{args.rank_select.upper()}")
    else:
        rank = _parse_rank(args.rank)
        if len(rank) != observed.ndim - 1:
            raise DataError(
                f"rank vector {rank} has length {len(rank)}; a {observed.ndim}-mode "
                f"tensor needs {observed.ndim - 1} entries"
            )
        cfg = RGradConfig(rank=rank, step=args.step, tol=args.tol, l_max=args.l_max,
                          init_sigma=args.init_sigma, seed=seed)
        fit = fit_mple(w_tr, model, cfg)

    save_tt(fit.b_hat, out / "b_hat.tt")
    write_dten(tt_full(fit.b_hat), out / "b_hat.dten")
    write_trace_csv(fit.trace, out / "trace.csv")
    print(f"fit finished after {len(fit.trace)} iterations; outputs in {out}")
    return 0


def cmd_complete(args) -> int:
    out = _outdir(args)
    x = read_dten(args.input)
    if args.split_seed is not None:
        split = split_observed(np.where(np.isnan(x), -1.0, 1.0), args.q, args.split_seed)
        x = np.where(split.train, x, np.nan)
    rank = _parse_rank(args.rank)
    fit = tucker_complete(x, rank, CompletionOptions(max_iter=args.max_iter, tol=args.tol))
    write_dten(fit.to_dense(), out / "xhat.dten")
    if args.emit_uncertainty:
        write_dten(tucker_tangent_norms(fit), out / "uhat.dten")
    _echo_config(out, "complete_config.json", {
        "input": str(args.input), "rank": list(rank), "max_iter": args.max_iter,
        "tol": args.tol, "q": args.q, "split_seed": args.split_seed,
        "emit_uncertainty": bool(args.emit_uncertainty),
    })
    print(f"wrote xhat.dten to {out} (objective {fit.objective_trace[-1]:.6g})")
    return 0


def cmd_conformal(args) -> int:
    out = _outdir(args)
    x = read_dten(args.data)
    xhat = read_dten(args.estimate)
    if np.isnan(xhat).any():
        raise DataError("completion estimate contains missing values")
    if xhat.shape != x.shape:
        raise DataError(f"estimate shape {xhat.shape} does not match data shape {x.shape}")
    split = split_observed(np.where(np.isnan(x), -1.0, 1.0), args.q, args.split_seed)
    model = PropensityModel(theta=args.theta, q=args.q)

    if args.unweighted:
        omega = np.ones_like(x)
    elif args.b_hat:
        omega = calibration_weights(split, load_tt(args.b_hat), model).omega
    elif args.b_star:
        omega = calibration_weights(split, read_dten(args.b_star), model).omega
    else:
        raise DataError("provide --b-hat, --b-star, or --unweighted")

    variant = args.score.replace("-", "_")
    uhat = read_dten(args.uhat) if args.uhat else None
    score = ScoreFunction(variant, uhat=uhat)
    ivs = conformal_intervals(x, xhat, split, omega, score, args.alpha)
    write_intervals_csv(ivs, out / "intervals.csv")
    _echo_config(out, "conformal_config.json", {
        "data": str(args.data), "estimate": str(args.estimate), "alpha": args.alpha,
        "score": args.score, "q": args.q, "split_seed": args.split_seed,
        "theta": args.theta, "unweighted": bool(args.unweighted),
        "b_hat": args.b_hat, "b_star": args.b_star, "uhat": args.uhat,
    })
    n_unbounded = int(ivs.unbounded.sum())
    print(f"wrote intervals.csv ({ivs.miss_offsets.size} entries, {n_unbounded} unbounded) to {out}")
    return 0


def _read_intervals_csv(path):
    lo, hi, offsets = [], [], []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        idx = {name: i for i, name in enumerate(header)}
        for line in fh:
            parts = line.strip().split(",")
            offsets.append(parts[idx["index"]])
            lo.append(float(parts[idx["lo"]]))
            hi.append(float(parts[idx["hi"]]))
    return offsets, np.array(lo), np.array(hi)


def cmd_evaluate(args) -> int:
    out = _outdir(args)
    truth = read_dten(args.truth)
    if len(args.intervals) != len(args.level):
        raise DataError("each --intervals file needs a matching --level")
    coverage_by_level = {}
    rows = []
    for path, tau in zip(args.intervals, args.level):
        keys, lo, hi = _read_intervals_csv(path)
        coords = [tuple(int(c) for c in key.split(":")) for key in keys]
        vals = np.array([truth[c] for c in coords])
        cov = empirical_coverage(lo, hi, vals)
        coverage_by_level[tau] = cov
        rows.append({
            "intervals": str(path), "level": tau, "coverage": cov,
            "mean_width": mean_finite_width(lo, hi), "n": len(keys),
        })
    report = {"per_level": rows}
    if coverage_by_level:
        report["avg_miscoverage_pct"] = miscoverage(coverage_by_level)
    write_json(report, out / "evaluation.json")
    for row in rows:
        print(f"level {row['level']:.3f}: coverage {row['coverage']:.4f}, "
              f"mean width {row['mean_width']:.4g}")
    if "avg_miscoverage_pct" in report:
        print(f"avg mis-coverage % over {len(rows)} levels: {report['avg_miscoverage_pct']:.4f}")
    return 0


def cmd_experiment(args) -> int:
    out = _outdir(args)
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, n_jobs=args.threads)
    _echo_config(out, "experiment_config.json", cfg.to_dict())
    result = run_experiment(cfg)
    write_json(result.to_dict(), out / "report.json")
    _write_tables_csv(result, out / "tables.csv", cfg.levels)
    for key, agg in sorted(result.aggregate.items()):
        print(f"{key}: avg mis-coverage {agg['avg_miscoverage_pct_mean']:.3f}% "
              f"(sd {agg['avg_miscoverage_pct_sd']:.3f})")
    return 0


def _write_tables_csv(result, path, levels) -> None:
    cols = ["rep", "method", "score", "avg_miscoverage_pct", "rse", "clamp_events", "unbounded"]
    cols += [f"coverage_{tau:.2f}" for tau in levels] + [f"width_{tau:.2f}" for tau in levels]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for rr in result.repetitions:
            for (method, score_name), rep in sorted(rr.reports.items()):
                row = [str(rr.rep), method, score_name,
                       f"{rep.avg_miscoverage_pct:.17g}",
                       "" if rep.rse is None else f"{rep.rse:.17g}",
                       str(rep.clamp_events), str(rep.unbounded)]
                row += [f"{rep.coverage[tau]:.17g}" for tau in levels]
                row += [f"{rep.mean_width[tau]:.17g}" for tau in levels]
                fh.write(",".join(row) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tenconf",
        description="Conformalized tensor completion: propensity-weighted intervals "
                    "around any tensor-completion estimate.",
    )
    parser.add_argument("--output-dir", default=".", help="where outputs and config echoes go")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate parameter, signal, masks, and masked data")
    p.add_argument("--config", help="ExperimentConfig JSON")
    p.add_argument("--d", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--noise", choices=["constant", "adversarial"])
    p.add_argument("--snr", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the low-rank propensity model to a mask or data tensor")
    p.add_argument("input", help="x.dten (NaN pattern) or mask.dten (±1)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--rank", help="comma-separated TT rank, e.g. 3,3")
    group.add_argument("--rank-select", choices=["aic", "bic"])
    p.add_argument("--candidates", help="comma-separated candidate ranks for --rank-select")
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--h", choices=["logit"], default="logit")
    p.add_argument("--q", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--l-max", type=int, default=500)
    p.add_argument("--init-sigma", type=float, default=0.1)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("complete", help="low-Tucker-rank least-squares completion")
    p.add_argument("input", help="x.dten with NaN at missing entries")
    p.add_argument("--rank", default="3,3,3")
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--q", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=None,
                   help="restrict fitting to the training split (use the same seed in `conformal`)")
    p.add_argument("--emit-uncertainty", action="store_true",
                   help="also write tangent-norm scales for the normalized score")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("conformal", help="build weighted conformal intervals at missing entries")
    p.add_argument("data", help="x.dten with NaN at missing entries")
    p.add_argument("estimate", help="xhat.dten from a completer trained on the training split")
    p.add_argument("--b-hat", help="fitted TT propensity parameter (cores file)")
    p.add_argument("--b-star", help="dense propensity parameter DTEN (oracle weights)")
    p.add_argument("--unweighted", action="store_true")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--score", choices=["absolute", "two-sided", "normalized"], default="absolute")
    p.add_argument("--uhat", help="uncertainty DTEN for the normalized score")
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--q", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=0,
                   help="MUST equal the split seed used when completing")
    p.set_defaults(func=cmd_conformal)

    p = sub.add_parser("evaluate", help="coverage metrics of interval files against a truth tensor")
    p.add_argument("--truth", required=True)
    p.add_argument("--intervals", action="append", default=[], help="intervals.csv (repeatable)")
    p.add_argument("--level", action="append", type=float, default=[],
                   help="nominal level matching each --intervals")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a full simulation experiment from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
