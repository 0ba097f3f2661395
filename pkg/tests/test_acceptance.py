"""End-to-end acceptance checks for the four benchmark presets.

Each numbered check prints one PASS/FAIL line.  The four pipelines run once
as session fixtures (the cubic-logistic one twice, for the determinism
check), so a full run of this module takes tens of minutes.
"""

import itertools
import json
import os
import shutil
import time

import numpy as np
import pytest
import scipy.integrate

from pfcontrol import pipeline as pl
from pfcontrol.control import (
    FeedbackMode,
    OperatorBank,
    StabilizationProblem,
    closed_loop_pf,
    extract_policy,
    lyapunov_certificate,
    solve_stabilization,
)
from pfcontrol.dictionary import (
    OverlapMethod,
    RbfDictionary,
    eval_dictionary,
    lambda_matrix,
    load_dictionary,
    rbf_gradient,
)
from pfcontrol.operator import load_operator, validate_markov
from pfcontrol.optim import SolveState
from pfcontrol.systems import SystemKind, SystemSpec, TimeKind, integrate_flow


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def logistic_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_logistic")
    t0 = time.perf_counter()
    result, summary = pl.reproduce(
        "cubic_logistic", output_dir=str(root / "run1"), strict=False
    )
    elapsed = time.perf_counter() - t0
    result2, _ = pl.reproduce(
        "cubic_logistic", output_dir=str(root / "run2"), strict=False
    )
    return {
        "result": result,
        "elapsed": elapsed,
        "dir1": str(root / "run1"),
        "dir2": str(root / "run2"),
    }


@pytest.fixture(scope="session")
def duffing_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("accept_duffing") / "run")
    result, _ = pl.reproduce("duffing", output_dir=out, strict=False)
    return result


@pytest.fixture(scope="session")
def double_well_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("accept_dwell") / "run")
    result, _ = pl.reproduce("double_well", output_dir=out, strict=False)
    return result


@pytest.fixture(scope="session")
def standard_map_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("accept_stdmap") / "run")
    result, _ = pl.reproduce("standard_map", output_dir=out, strict=False)
    return result


@pytest.fixture(scope="session")
def all_runs(logistic_runs, duffing_run, double_well_run, standard_map_run):
    return {
        "cubic_logistic": logistic_runs["result"],
        "duffing": duffing_run,
        "double_well": double_well_run,
        "standard_map": standard_map_run,
    }


def _closed_loop(result, ics, horizon, conv_radius):
    cfg = result.config
    return pl.simulate(
        cfg.system,
        result.rbf,
        result.policy,
        ics,
        horizon,
        mode="closed_loop",
        targets=np.asarray(cfg.stabilization.targets),
        conv_radius=conv_radius,
        substeps=cfg.data.substeps,
        grid=cfg.grid,
    )


class TestCriterion1OperatorStructure:
    def test_structure_and_runtime(self, all_runs):
        worst_entry = 0.0
        worst_dev = 0.0
        worst_fit_s = 0.0
        for name, result in all_runs.items():
            for pf in result.bank.p_list:
                worst_entry = max(worst_entry, -float(pf.p_mat.min()))
                worst_dev = max(
                    worst_dev, float(np.max(np.abs(pf.p_mat.sum(axis=0) - 1.0)))
                )
            worst_fit_s = max(worst_fit_s, *result.manifest["diagnostics"]["fit_seconds"])
        ok = worst_entry <= 1e-6 and worst_dev <= 1e-6 and worst_fit_s < 300.0
        _report(
            1,
            ok,
            f"min entry >= -{worst_entry:.2e}, column sums within {worst_dev:.2e},"
            f" slowest per-action fit {worst_fit_s:.1f}s (target < 300s)",
        )
        assert worst_entry <= 1e-6
        assert worst_dev <= 1e-6
        assert worst_fit_s < 300.0


class TestCriterion2ResidualBand:
    def test_residual_band(self, all_runs):
        failures = []
        for name, result in all_runs.items():
            for edmd, nsdmd in zip(result.edmd_residuals, result.nsdmd_residuals):
                if not (edmd - 1e-12 <= nsdmd <= 1.5 * edmd + 1e-12):
                    failures.append(
                        f"{name}: constrained {nsdmd:.3e} vs unconstrained {edmd:.3e}"
                    )
        ok = not failures
        detail = "constrained residual within [1x, 1.5x] of the unconstrained fit"
        if failures:
            detail = (
                f"{len(failures)} fits fall outside the band, e.g. {failures[0]}; "
                "the empirical Gram matrix is numerically invertible on these "
                "presets, so the unconstrained fit interpolates with residual "
                "~1e-16 and no constrained fit can stay within 1.5x of it"
            )
        _report(2, ok, detail)
        assert ok, detail


def _enumeration_optimum(p1_list, g1, gamma, m):
    n = p1_list[0].shape[0]
    best = np.inf
    for assignment in itertools.product(range(len(p1_list)), repeat=n):
        q = np.column_stack([p1_list[a][:, j] for j, a in enumerate(assignment)])
        try:
            occ = np.linalg.solve(np.eye(n) - gamma * q, m)
        except np.linalg.LinAlgError:
            continue
        if occ.min() < -1e-9:
            continue
        best = min(best, float(sum(g1[j, a] * occ[j] for j, a in enumerate(assignment))))
    return best


class TestCriterion3LpOracle:
    def test_lp_matches_policy_enumeration(self):
        from pfcontrol.operator import PFMatrix
        from pfcontrol.systems import ControlGrid

        worst = 0.0
        count = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = 2 if seed % 2 == 0 else 3
            m_actions = n
            p1s = [
                0.85 * (lambda p: p / p.sum(axis=0))(np.abs(rng.standard_normal((n, n))) + 0.05)
                for _ in range(m_actions)
            ]
            full = []
            for p1 in p1s:
                k = n + 1
                p = np.zeros((k, k))
                p[0, 0] = 1.0
                p[1:, 1:] = p1
                p[0, 1:] = 1.0 - p1.sum(axis=0)
                full.append(PFMatrix(p_mat=p))
            grid = ControlGrid(values=tuple((float(v),) for v in np.linspace(-1, 1, m_actions)))
            g_full = np.abs(rng.standard_normal((n + 1, m_actions))) + 0.01
            g_full[0, :] = 0.0
            bank = OperatorBank(actions=grid, p_list=full)
            prob = StabilizationProblem(
                attractor_indices=[0], gamma=1.05, cost_values=g_full
            )
            sol = solve_stabilization(bank, prob)
            assert sol.status.state == SolveState.OPTIMAL, f"seed {seed}"
            oracle = _enumeration_optimum(p1s, g_full[1:, :], 1.05, np.ones(n))
            worst = max(worst, abs(sol.objective - oracle) / max(1.0, abs(oracle)))
            count += 1
        ok = worst <= 1e-7
        _report(3, ok, f"{count} randomized instances, worst relative gap {worst:.2e}")
        assert ok


class TestCriterion4CubicLogistic:
    def test_stabilization_rate_and_runtime(self, logistic_runs):
        result = logistic_runs["result"]
        rng = np.random.default_rng(202)
        ics = rng.uniform(-1.6, 1.6, size=(50, 1))
        recs = _closed_loop(result, ics, 20, conv_radius=0.05)
        hits = sum(1 for r in recs if np.any(np.abs(r.states[:, 0]) < 0.05))
        elapsed = logistic_runs["elapsed"]
        ok = hits >= 45 and elapsed < 900.0
        _report(
            4,
            ok,
            f"{hits}/50 initial conditions reach |x|<0.05 within 20 steps "
            f"(>=45 required); end-to-end {elapsed:.0f}s (target < 900s)",
        )
        assert hits >= 45
        assert elapsed < 900.0


class TestCriterion5Duffing:
    def test_closed_loop_stabilizes_origin(self, duffing_run):
        rng = np.random.default_rng(303)
        ics = rng.uniform(-2, 2, size=(20, 2))
        recs = _closed_loop(duffing_run, ics, 200, conv_radius=0.15)
        hits = sum(1 for r in recs if np.any(np.linalg.norm(r.states, axis=1) < 0.15))
        cfg = duffing_run.config
        open_recs = pl.simulate(
            cfg.system, duffing_run.rbf, duffing_run.policy, ics, 300,
            mode="open_loop", targets=np.asarray(cfg.stabilization.targets),
            conv_radius=0.15, substeps=cfg.data.substeps,
        )
        wells = 0
        for r in open_recs:
            end = r.states[-1]
            d_wells = min(
                np.linalg.norm(end - np.array([1.0, 0.0])),
                np.linalg.norm(end - np.array([-1.0, 0.0])),
            )
            if d_wells < 0.2 and np.linalg.norm(end) > 0.5:
                wells += 1
        ok = hits >= 16 and wells >= 16
        _report(
            5,
            ok,
            f"closed loop: {hits}/20 reach ||x||<0.15 within 200 steps (>=16); "
            f"open loop: {wells}/20 settle at (+-1,0) instead",
        )
        assert hits >= 16
        assert wells >= 16


class TestCriterion6DoubleWell:
    def test_closed_loop_stabilizes_saddle(self, double_well_run):
        rng = np.random.default_rng(404)
        ics = rng.uniform(-2, 2, size=(20, 2))
        target = np.array([0.5, 0.0])
        recs = _closed_loop(double_well_run, ics, 200, conv_radius=0.15)
        hits = sum(
            1
            for r in recs
            if np.any(np.linalg.norm(r.states - target, axis=1) < 0.15)
        )
        cfg = double_well_run.config
        open_recs = pl.simulate(
            cfg.system, double_well_run.rbf, double_well_run.policy, ics, 300,
            mode="open_loop", targets=np.asarray(cfg.stabilization.targets),
            conv_radius=0.15, substeps=cfg.data.substeps,
        )
        wells = 0
        for r in open_recs:
            end = r.states[-1]
            d_wells = min(
                np.linalg.norm(end - np.array([1.0, 0.0])),
                np.linalg.norm(end - np.array([-1.0, 0.0])),
            )
            if d_wells < 0.2:
                wells += 1
        ok = hits >= 16 and wells >= 16
        _report(
            6,
            ok,
            f"closed loop: {hits}/20 reach within 0.15 of (0.5,0) (>=16); "
            f"open loop: {wells}/20 settle at (+-1,0)",
        )
        assert hits >= 16
        assert wells >= 16


class TestCriterion7StandardMap:
    def test_period_two_capture(self, standard_map_run):
        rng = np.random.default_rng(505)
        ics = rng.uniform(0, 1, size=(20, 2))
        recs = _closed_loop(standard_map_run, ics, 300, conv_radius=0.05)
        captured = 0
        for r in recs:
            tail = r.states[-40:]
            xs, ys = tail[:, 0], tail[:, 1]
            near25 = np.abs(xs - 0.25) < 0.05
            near75 = np.abs(xs - 0.75) < 0.05
            on_orbit = np.all(near25 | near75)
            alternates = on_orbit and np.all(near25[:-1] != near25[1:])
            if alternates and np.all(np.abs(ys - 0.5) < 0.05):
                captured += 1
        ok = captured >= 14
        _report(
            7,
            ok,
            f"{captured}/20 trajectories alternate within 0.05 of the period-2 "
            "orbit after transient (>=14 required)",
        )
        assert captured >= 14


class TestCriterion8Certificates:
    def test_passing_runs_carry_certificates(self, all_runs):
        bad = []
        min_mu = np.inf
        for name, result in all_runs.items():
            cert = result.certificate
            if not cert.passed or not cert.spectral_radius < 1.0:
                bad.append(name)
            elif cert.mu_bar is not None:
                min_mu = min(min_mu, float(cert.mu_bar.min()))
        ok = not bad and min_mu >= -1e-8
        _report(
            8,
            ok,
            f"all four presets certified (rho<1, min measure entry {min_mu:.3e});"
            f" failing presets: {bad or 'none'}",
        )
        assert not bad
        assert min_mu >= -1e-8

    def test_detuned_discount_is_reported_failed(self, logistic_runs, tmp_path):
        # gamma only enters synthesis, so the de-tuned run reuses the fitted
        # operators and must surface its failure through every channel
        src = logistic_runs["dir1"]
        bundle = tmp_path / "detuned"
        shutil.copytree(src, bundle)
        with open(bundle / "manifest.json") as fh:
            manifest = json.load(fh)
        manifest["config"]["stabilization"]["gamma"] = 2.5
        cfg = pl.PipelineConfig.from_dict(manifest["config"])
        rbf = load_dictionary(bundle / "dictionary.csv", bundle / "dictionary.json")
        m_actions = len(cfg.grid)
        p_list = [
            load_operator(bundle / f"operator_a{a}.csv")[0]
            for a in range(1, m_actions + 1)
        ]
        bank = OperatorBank(actions=cfg.grid, p_list=p_list)
        att = np.asarray(manifest["diagnostics"]["attractor_indices"], dtype=int)
        prob = StabilizationProblem(
            attractor_indices=att, gamma=2.5, cost_values=pl.cost_matrix(cfg, rbf)
        )
        sol = solve_stabilization(bank, prob)
        if sol.status.state == SolveState.OPTIMAL:
            policy = extract_policy(sol, bank, prob)
            cert = lyapunov_certificate(closed_loop_pf(bank, policy), prob)
            reported_failed = not cert.passed
            detail = (
                f"gamma=2.5 synthesis solved but certificate fails "
                f"(rho={cert.spectral_radius:.4f})"
            )
        else:
            reported_failed = True
            detail = (
                "gamma=2.5 synthesis is infeasible and reported as "
                f"{sol.status.state.value} with guidance to lower gamma"
            )
        _report(8, reported_failed, "de-tuned run: " + detail)
        assert reported_failed


class TestCriterion9NumericalCrossChecks:
    def test_overlap_closed_form_vs_monte_carlo(self):
        rng = np.random.default_rng(6)
        centers = rng.uniform(-1, 1, size=(6, 2))
        rbf = RbfDictionary(centers=centers, sigma=0.35, dim=2)
        closed = lambda_matrix(rbf)
        pad = 6 * rbf.sigma
        mc = lambda_matrix(
            rbf,
            OverlapMethod.MONTE_CARLO,
            mc_samples=1_000_000,
            seed=3,
            domain=(centers.min(axis=0) - pad, centers.max(axis=0) + pad),
        )
        rel = float(np.max(np.abs(mc.lam - closed.lam) / np.abs(closed.lam)))
        ok_overlap = rel < 0.01

        spec = SystemSpec(
            kind=SystemKind.DUFFING,
            params={"damping": 0.5},
            state_dim=2,
            domain_lower=(-2, -2),
            domain_upper=(2, 2),
            time_kind=TimeKind.CONTINUOUS_FLOW,
            dt=0.5,
        )
        states = np.random.default_rng(7).uniform(-1.5, 1.5, size=(10, 2))
        errs = []
        for s in (1, 2, 4, 8):
            worst = 0.0
            for x in states:
                ref = integrate_flow(spec, x, np.array([0.2]), 0.5, 512)
                approx = integrate_flow(spec, x, np.array([0.2]), 0.5, s)
                worst = max(worst, float(np.max(np.abs(approx - ref))))
            errs.append(worst)
        slope = float(np.polyfit(np.log([0.5 / s for s in (1, 2, 4, 8)]), np.log(errs), 1)[0])
        ok_rk4 = 3.5 <= slope <= 4.5

        rbf1 = RbfDictionary(
            centers=np.random.default_rng(8).uniform(-1, 1, size=(6, 2)),
            sigma=0.4,
            dim=2,
        )
        h = 1e-6
        worst_grad = 0.0
        for x in np.random.default_rng(9).uniform(-1, 1, size=(20, 2)):
            analytic = rbf_gradient(rbf1, x)
            fd = np.empty_like(analytic)
            for axis in range(2):
                e = np.zeros(2)
                e[axis] = h
                fd[:, axis] = (
                    eval_dictionary(rbf1, x + e) - eval_dictionary(rbf1, x - e)
                ) / (2 * h)
            denom = np.maximum(np.abs(analytic), 1e-8)
            worst_grad = max(worst_grad, float(np.max(np.abs(analytic - fd) / denom)))
        ok_grad = worst_grad < 1e-5

        ok = ok_overlap and ok_rk4 and ok_grad
        _report(
            9,
            ok,
            f"overlap closed-form vs Monte-Carlo {rel:.4%} (<1%); RK4 slope "
            f"{slope:.2f} in [3.5,4.5]; gradient mismatch {worst_grad:.2e} (<1e-5)",
        )
        assert ok_overlap and ok_rk4 and ok_grad


class TestCriterion10Determinism:
    def test_reproduce_twice_byte_identical(self, logistic_runs):
        same = []
        for name in ("theta.csv", "policy.csv", "certificate.json"):
            a = open(os.path.join(logistic_runs["dir1"], name), "rb").read()
            b = open(os.path.join(logistic_runs["dir2"], name), "rb").read()
            same.append(a == b)
        ok = all(same)
        _report(
            10,
            ok,
            "two reproduce runs yield byte-identical occupation, policy and "
            f"certificate files: {dict(zip(['theta', 'policy', 'certificate'], same))}",
        )
        assert ok


class TestMarkovValidationOnBundles:
    def test_every_operator_validates(self, all_runs):
        for name, result in all_runs.items():
            for a, pf in enumerate(result.bank.p_list, start=1):
                assert validate_markov(pf, 1e-6).passed, f"{name} action {a}"
