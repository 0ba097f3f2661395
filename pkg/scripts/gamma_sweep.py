#!/usr/bin/env python3
"""Sweep discount factor and attractor radius over an existing bundle.

The operator fits do not depend on either knob, so each grid point only
re-runs synthesis, policy extraction, the certificate, and a batch of
closed-loop rollouts.  Results go to stdout and a CSV next to the bundle.
"""

import argparse
import csv
import json
import os

import numpy as np

from pfcontrol import pipeline as pl
from pfcontrol.control import (
    OperatorBank,
    StabilizationProblem,
    closed_loop_pf,
    extract_policy,
    lyapunov_certificate,
    solve_stabilization,
)
from pfcontrol.dictionary import load_dictionary
from pfcontrol.operator import load_operator
from pfcontrol.optim import SolveState


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("bundle")
    parser.add_argument("--gammas", default="1.005,1.01,1.02,1.05,1.1,1.2")
    parser.add_argument("--radii", default="")
    parser.add_argument("--n-rollouts", type=int, default=20)
    parser.add_argument("--horizon", type=int, default=200)
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args()

    with open(os.path.join(args.bundle, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = pl.PipelineConfig.from_dict(manifest["config"])
    rbf = load_dictionary(
        os.path.join(args.bundle, "dictionary.csv"),
        os.path.join(args.bundle, "dictionary.json"),
    )
    m_actions = len(cfg.grid)
    p_list = [
        load_operator(os.path.join(args.bundle, f"operator_a{a}.csv"))[0]
        for a in range(1, m_actions + 1)
    ]
    bank = OperatorBank(actions=cfg.grid, p_list=p_list)
    gammas = [float(g) for g in args.gammas.split(",") if g]
    radii = (
        [float(r) for r in args.radii.split(",") if r]
        if args.radii
        else [cfg.r_att()]
    )
    targets = np.asarray(cfg.stabilization.targets)
    rng = np.random.default_rng(args.seed)
    ics = rng.uniform(
        cfg.system.lower, cfg.system.upper, size=(args.n_rollouts, cfg.system.state_dim)
    )

    rows = []
    for r_att in radii:
        cfg.stabilization.r_att = r_att
        att = pl.attractor_indices(cfg, rbf)
        for gamma in gammas:
            prob = StabilizationProblem(
                attractor_indices=att,
                gamma=gamma,
                cost_values=pl.cost_matrix(cfg, rbf),
                normalize_flag=cfg.stabilization.normalize_flag,
            )
            sol = solve_stabilization(bank, prob)
            if sol.status.state != SolveState.OPTIMAL:
                rows.append([gamma, r_att, len(att), sol.status.state.value,
                             "", "", "", ""])
                print(f"gamma={gamma:<6} r_att={r_att:<5} -> {sol.status.state.value}")
                continue
            policy = extract_policy(sol, bank, prob)
            cert = lyapunov_certificate(closed_loop_pf(bank, policy), prob)
            recs = pl.simulate(
                cfg.system, rbf, policy, ics, args.horizon, mode="closed_loop",
                targets=targets, conv_radius=0.15, substeps=cfg.data.substeps,
                grid=cfg.grid,
            )
            hits = sum(
                1 for r in recs
                if np.any(np.min(np.linalg.norm(
                    r.states[:, None, :] - targets[None], axis=2), axis=1) < 0.15)
            )
            rows.append([gamma, r_att, len(att), "optimal", sol.objective,
                         cert.spectral_radius, int(cert.passed),
                         f"{hits}/{args.n_rollouts}"])
            print(
                f"gamma={gamma:<6} r_att={r_att:<5} -> objective={sol.objective:<12.5g}"
                f" rho={cert.spectral_radius:.4f} cert={'PASS' if cert.passed else 'fail'}"
                f" capture={hits}/{args.n_rollouts}"
            )
    out = os.path.join(args.bundle, "gamma_sweep.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["gamma", "r_att", "n_attractor", "status", "objective",
             "spectral_radius", "cert_pass", "capture"]
        )
        writer.writerows(rows)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
