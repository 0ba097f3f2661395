#!/usr/bin/env python3
"""Run one benchmark preset end to end and print closed-loop statistics."""

import argparse
import time

import numpy as np

from pfcontrol import pipeline as pl


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("benchmark", choices=pl.PRESET_NAMES)
    parser.add_argument("--output", default=None)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--gamma", type=float, default=None)
    parser.add_argument("--allow-failed-certificate", action="store_true")
    args = parser.parse_args()

    overrides = {}
    if args.gamma is not None:
        overrides["stabilization.gamma"] = args.gamma
    t0 = time.perf_counter()
    result, summary = pl.reproduce(
        args.benchmark,
        output_dir=args.output,
        seed=args.seed,
        overrides=overrides or None,
        strict=not args.allow_failed_certificate,
    )
    elapsed = time.perf_counter() - t0
    cert = result.certificate
    diag = result.manifest["diagnostics"]
    print(f"bundle:            {result.bundle_dir}")
    print(f"wall time:         {elapsed:.0f}s")
    print(f"certificate:       pass={cert.passed} rho={cert.spectral_radius:.10g}")
    print(f"lp objective:      {diag['lp_objective']:.6g}")
    print(f"balance residual:  {diag['balance_residual']:.3e}")
    print(f"max fit violation: {max(v['constraint_violation'] for v in diag['operator_fits']):.3e}")
    for mode, counts in summary.items():
        print(f"{mode:>12}: {counts['converged']}/{counts['n']} converged, "
              f"{counts['diverged']} diverged")
    # quick capture statistic against the preset targets
    cfg = result.config
    rng = np.random.default_rng(1234)
    ics = rng.uniform(cfg.system.lower, cfg.system.upper, size=(20, cfg.system.state_dim))
    recs = pl.simulate(
        cfg.system, result.rbf, result.policy, ics,
        pl._REPRODUCE_HORIZON.get(args.benchmark, 200),
        mode="closed_loop", targets=np.asarray(cfg.stabilization.targets),
        conv_radius=0.15, substeps=cfg.data.substeps, grid=cfg.grid,
    )
    targets = np.asarray(cfg.stabilization.targets)
    hits = sum(
        1 for r in recs
        if np.any(np.min(np.linalg.norm(r.states[:, None, :] - targets[None], axis=2), axis=1) < 0.15)
    )
    print(f"fresh rollouts:    {hits}/20 reach within 0.15 of the target set")


if __name__ == "__main__":
    main()
