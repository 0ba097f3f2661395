"""Command-line interface.

Subcommands cover the full workflow: ``generate`` (datasets), ``fit``
(dictionary + operators), ``synthesize`` (LP, policy, certificate), ``run``
(all stages from a config file), ``reproduce`` (named benchmark presets),
``simulate`` (rollouts from a finished bundle), and ``verify`` (re-check a
bundle).  Exit codes: 0 success, 2 config error, 3 solver failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import pipeline as pl
from .control import FeedbackMode, load_policy
from .dictionary import load_dictionary


def _load_config(path: str) -> pl.PipelineConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise pl.ConfigError(f"cannot read config {path}: {exc}") from exc
    return pl.PipelineConfig.from_dict(doc)


def _apply_overrides(cfg: pl.PipelineConfig, pairs) -> None:
    for pair in pairs or []:
        key, _, raw = pair.partition("=")
        if not raw:
            raise pl.ConfigError(f"override {pair!r} is not key=value")
        section, _, fieldname = key.partition(".")
        target = getattr(cfg, section, None)
        if target is None or not hasattr(target, fieldname):
            raise pl.ConfigError(f"unknown config field {key!r}")
        current = getattr(target, fieldname)
        value = json.loads(raw) if not isinstance(current, str) else raw
        setattr(target, fieldname, value)


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args.set)
    out = args.output or cfg.output_dir or os.path.join(pl._output_root(), cfg.name)
    os.makedirs(out, exist_ok=True)
    datasets = pl.generate_dataset(
        cfg.system, cfg.grid, cfg.data.n_traj, cfg.data.traj_len, cfg.data.seed,
        substeps=cfg.data.substeps,
    )
    for ds in datasets:
        pl.write_dataset(ds, os.path.join(out, f"data_a{ds.action_index}.csv"))
    print(f"wrote {len(datasets)} datasets to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args.set)
    if args.output:
        cfg.output_dir = args.output
    result = pl.run_pipeline(cfg)
    summary = pl.emit_rollouts(result) if args.rollouts else {}
    print(f"bundle: {result.bundle_dir}")
    print(f"certificate pass: {result.certificate.passed} "
          f"(spectral radius {result.certificate.spectral_radius:.10g})")
    if summary:
        print(f"rollouts: {summary}")
    return 0


def cmd_fit(args) -> int:
    # fit = run the pipeline through the operator stage only; implemented as a
    # full run without synthesis by reusing run_pipeline's stages would need
    # partial execution, so we run generate+dictionary+operators directly.
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args.set)
    out = args.output or cfg.output_dir or os.path.join(pl._output_root(), cfg.name)
    os.makedirs(out, exist_ok=True)
    datasets = pl.generate_dataset(
        cfg.system, cfg.grid, cfg.data.n_traj, cfg.data.traj_len, cfg.data.seed,
        substeps=cfg.data.substeps,
    )
    centers = pl.build_centers(cfg, datasets)
    rbf = pl.RbfDictionary(centers=centers, sigma=cfg.dictionary.sigma, dim=cfg.system.state_dim)
    lam = pl.lambda_matrix(rbf)
    pl.save_dictionary(rbf, lam, os.path.join(out, "dictionary.csv"), os.path.join(out, "dictionary.json"))
    warm = None
    for ds in datasets:
        grams = pl.gram_matrices(rbf, ds)
        koop, pf = pl.fit_nsdmd(grams, lam, cfg.nsdmd, warm_start=warm)
        warm = koop.k_mat
        pl.save_operator(
            pf,
            os.path.join(out, f"operator_a{ds.action_index}.csv"),
            os.path.join(out, f"operator_a{ds.action_index}.json"),
            action_index=ds.action_index,
            residual=koop.fit_residual,
            violation=koop.constraint_violation,
            config_hash=cfg.config_hash(),
        )
        print(f"action {ds.action_index}: residual {koop.fit_residual:.6g}")
    return 0


def cmd_synthesize(args) -> int:
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args.set)
    if args.output:
        cfg.output_dir = args.output
    result = pl.run_pipeline(cfg)
    print(f"objective {result.occupation.objective:.10g}; "
          f"certificate pass: {result.certificate.passed}")
    return 0


def cmd_reproduce(args) -> int:
    result, summary = pl.reproduce(args.benchmark, output_dir=args.output, seed=args.seed)
    print(f"bundle: {result.bundle_dir}")
    print(f"certificate pass: {result.certificate.passed} "
          f"(spectral radius {result.certificate.spectral_radius:.10g})")
    for mode, counts in summary.items():
        print(f"{mode}: {counts['converged']}/{counts['n']} converged, "
              f"{counts['diverged']} diverged")
    return 0


def cmd_simulate(args) -> int:
    bundle = args.bundle
    with open(os.path.join(bundle, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = pl.PipelineConfig.from_dict(manifest["config"])
    rbf = load_dictionary(
        os.path.join(bundle, "dictionary.csv"), os.path.join(bundle, "dictionary.json")
    )
    att = np.asarray(manifest["diagnostics"]["attractor_indices"], dtype=int)
    policy = load_policy(
        os.path.join(bundle, "policy.csv"),
        att,
        feedback_mode=FeedbackMode(cfg.stabilization.feedback_mode),
        grid_snap=cfg.stabilization.grid_snap,
    )
    if args.initial:
        ics = np.asarray([json.loads(s) for s in args.initial], dtype=float)
        ics = np.atleast_2d(ics)
    else:
        rng = np.random.default_rng(args.seed)
        ics = rng.uniform(
            cfg.system.lower, cfg.system.upper, size=(args.n_initial, cfg.system.state_dim)
        )
    records = pl.simulate(
        cfg.system,
        rbf,
        policy,
        ics,
        args.horizon,
        mode=args.mode,
        targets=np.asarray(cfg.stabilization.targets),
        conv_radius=cfg.r_att(),
        substeps=cfg.data.substeps,
        grid=cfg.grid,
    )
    targets = np.asarray(cfg.stabilization.targets, dtype=float)

    def stage_cost(x, u):
        d2 = float(np.min(np.sum((targets - x) ** 2, axis=1)))
        return d2 + float(np.sum(np.asarray(u) ** 2))

    pl.rollout_files(records, cfg.stabilization.gamma, stage_cost, bundle, args.mode)
    n_conv = sum(r.converged for r in records)
    print(f"{n_conv}/{len(records)} rollouts converged "
          f"(radius {cfg.r_att():.4g}, dwell 5)")
    return 0


def cmd_verify(args) -> int:
    report = pl.verify(args.bundle)
    print(f"verify passed; spectral radius {report['spectral_radius_str']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfcontrol",
        description="Data-driven transfer-operator controller synthesis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write per-action snapshot datasets")
    p.add_argument("config")
    p.add_argument("--output")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="build dictionary and fit per-action operators")
    p.add_argument("config")
    p.add_argument("--output")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synthesize", help="run all stages and report the certificate")
    p.add_argument("config")
    p.add_argument("--output")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("config")
    p.add_argument("--output")
    p.add_argument("--rollouts", action="store_true", help="also emit rollout files")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reproduce", help="run a named benchmark preset")
    p.add_argument("benchmark", choices=pl.PRESET_NAMES)
    p.add_argument("--output")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("simulate", help="roll out a saved policy")
    p.add_argument("bundle")
    p.add_argument("--mode", choices=["open_loop", "closed_loop"], default="closed_loop")
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--n-initial", type=int, default=10)
    p.add_argument("--initial", action="append", metavar="JSON_STATE")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="re-check a finished bundle")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except pl.SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except pl.VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
