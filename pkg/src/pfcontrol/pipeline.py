"""End-to-end orchestration: data -> dictionary -> operators -> policy -> certificate.

A run is described by a :class:`PipelineConfig`; :func:`run_pipeline` executes
the stages into a bundle directory and returns the in-memory results next to a
manifest.  :func:`reproduce` runs a named benchmark preset with the published
parameters and additionally emits open/closed-loop rollout files.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from .control import (
    FeedbackMode,
    LyapunovCertificate,
    OperatorBank,
    Policy,
    StabilizationProblem,
    closed_loop_pf,
    evaluate_cost,
    extract_policy,
    feedback,
    load_policy,
    lyapunov_certificate,
    restrict_operator,
    save_certificate,
    save_policy,
    solve_stabilization,
)
from .dictionary import (
    OverlapMethod,
    RbfDictionary,
    eval_dictionary,
    gram_matrices,
    grid_centers,
    kmeans,
    lambda_matrix,
    load_dictionary,
    overlap_condition,
    save_dictionary,
)
from .operator import (
    NsdmdConfig,
    fit_edmd_unconstrained,
    fit_nsdmd,
    load_operator,
    save_operator,
    validate_markov,
)
from .optim import SolveState
from .systems import (
    ControlGrid,
    SystemKind,
    SystemSpec,
    TimeKind,
    advance,
    generate_dataset,
    read_dataset,
    write_dataset,
)

OUTPUT_ROOT_ENV = "PFCONTROL_OUTPUT_ROOT"


class ConfigError(Exception):
    """Invalid configuration; the CLI maps this to exit code 2."""


class SolverFailure(Exception):
    """Synthesis LP failed; the CLI maps this to exit code 3."""


class VerificationFailure(Exception):
    """Bundle checks failed; the CLI maps this to exit code 4."""


class MissingArtifacts(VerificationFailure):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing bundle files: " + ", ".join(self.missing))


@dataclass
class DictionaryConfig:
    k_centers: int
    sigma: float
    center_mode: str = "kmeans"  # or "grid"
    pin_attractor_centers: bool = True

    def __post_init__(self):
        if self.k_centers < 2:
            raise ConfigError("k_centers must be >= 2")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.center_mode not in ("kmeans", "grid"):
            raise ConfigError("center_mode must be 'kmeans' or 'grid'")


@dataclass
class DataConfig:
    n_traj: int
    traj_len: int
    seed: int = 7
    substeps: int = 10

    def __post_init__(self):
        if self.n_traj < 1 or self.traj_len < 1:
            raise ConfigError("n_traj and traj_len must be >= 1")


@dataclass
class StabilizationConfig:
    targets: tuple  # attractor points, tuple of state tuples
    gamma: float = 1.05
    r_att: float | None = None  # default 2 sigma, resolved at run time
    cost_expr: str = "quadratic"
    normalize_flag: bool = False
    feedback_mode: str = "partition_of_unity"
    grid_snap: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.targets:
            raise ConfigError("at least one target point is required")
        self.targets = tuple(tuple(float(v) for v in t) for t in self.targets)
        if self.cost_expr != "quadratic":
            raise ConfigError("cost_expr currently supports only 'quadratic'")
        try:
            FeedbackMode(self.feedback_mode)
        except ValueError as exc:
            raise ConfigError(f"unknown feedback_mode {self.feedback_mode}") from exc


@dataclass
class PipelineConfig:
    name: str
    system: SystemSpec
    grid: ControlGrid
    dictionary: DictionaryConfig
    data: DataConfig
    nsdmd: NsdmdConfig
    stabilization: StabilizationConfig
    output_dir: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "system": {
                "kind": self.system.kind.value,
                "params": dict(self.system.params),
                "state_dim": self.system.state_dim,
                "domain_lower": list(self.system.domain_lower),
                "domain_upper": list(self.system.domain_upper),
                "time_kind": self.system.time_kind.value,
                "dt": self.system.dt,
            },
            "grid": {"values": [list(u) for u in self.grid.values], "d": self.grid.d},
            "dictionary": asdict(self.dictionary),
            "data": asdict(self.data),
            "nsdmd": asdict(self.nsdmd),
            "stabilization": {
                **asdict(self.stabilization),
                "targets": [list(t) for t in self.stabilization.targets],
            },
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        try:
            sysdoc = doc["system"]
            spec = SystemSpec(
                kind=SystemKind(sysdoc["kind"]),
                params=dict(sysdoc["params"]),
                state_dim=int(sysdoc["state_dim"]),
                domain_lower=tuple(sysdoc["domain_lower"]),
                domain_upper=tuple(sysdoc["domain_upper"]),
                time_kind=TimeKind(sysdoc["time_kind"]),
                dt=float(sysdoc.get("dt", 0.0)),
            )
            griddoc = doc["grid"]
            grid = ControlGrid(
                values=tuple(tuple(u) for u in griddoc["values"]),
                d=int(griddoc.get("d", 1)),
            )
            stab = dict(doc["stabilization"])
            stab["targets"] = tuple(tuple(t) for t in stab["targets"])
            return cls(
                name=str(doc.get("name", "run")),
                system=spec,
                grid=grid,
                dictionary=DictionaryConfig(**doc["dictionary"]),
                data=DataConfig(**doc["data"]),
                nsdmd=NsdmdConfig(**doc.get("nsdmd", {})),
                stabilization=StabilizationConfig(**stab),
                output_dir=str(doc.get("output_dir", "")),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir")  # location does not change the results
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def r_att(self) -> float:
        r = self.stabilization.r_att
        return 2.0 * self.dictionary.sigma if r is None else float(r)


@dataclass
class RolloutRecord:
    mode: str  # "open_loop" | "closed_loop"
    initial_state: np.ndarray
    states: np.ndarray  # (T+1, q)
    controls: np.ndarray  # (T, d)
    converged: bool
    steps_to_converge: int | None
    diverged: bool = False


@dataclass
class PipelineResult:
    config: PipelineConfig
    bundle_dir: str
    rbf: RbfDictionary
    bank: OperatorBank
    problem: StabilizationProblem
    occupation: "object"
    policy: Policy
    certificate: LyapunovCertificate
    manifest: dict
    edmd_residuals: list
    nsdmd_residuals: list


# ---------------------------------------------------------------------------
# benchmark presets (published parameter sets)
# ---------------------------------------------------------------------------


def preset(name: str, seed: int = 7) -> PipelineConfig:
    if name == "cubic_logistic":
        return PipelineConfig(
            name=name,
            system=SystemSpec(
                kind=SystemKind.CUBIC_LOGISTIC,
                params={"lam": 2.3},
                state_dim=1,
                domain_lower=(-1.6,),
                domain_upper=(1.6,),
                time_kind=TimeKind.DISCRETE_MAP,
            ),
            grid=ControlGrid.from_range(-0.2, 0.02, 0.2),
            dictionary=DictionaryConfig(k_centers=200, sigma=0.008, center_mode="grid"),
            data=DataConfig(n_traj=1000, traj_len=10, seed=seed),
            nsdmd=NsdmdConfig(max_iter=4000),
            stabilization=StabilizationConfig(targets=((0.0,),)),
        )
    if name == "duffing":
        return PipelineConfig(
            name=name,
            system=SystemSpec(
                kind=SystemKind.DUFFING,
                params={"damping": 0.5},
                state_dim=2,
                domain_lower=(-2.0, -2.0),
                domain_upper=(2.0, 2.0),
                time_kind=TimeKind.CONTINUOUS_FLOW,
                dt=0.1,
            ),
            grid=ControlGrid.from_range(-4.0, 0.5, 4.0),
            dictionary=DictionaryConfig(k_centers=100, sigma=0.2),
            data=DataConfig(n_traj=500, traj_len=20, seed=seed),
            nsdmd=NsdmdConfig(max_iter=12000),
            # r_att below the 2-sigma default: the saddle needs active control
            # in the 0.15..0.4 shell, and the model stays feasible at 0.25
            stabilization=StabilizationConfig(targets=((0.0, 0.0),), r_att=0.25),
        )
    if name == "double_well":
        return PipelineConfig(
            name=name,
            system=SystemSpec(
                kind=SystemKind.DOUBLE_WELL,
                params={"a": 0.5},
                state_dim=2,
                domain_lower=(-2.0, -2.0),
                domain_upper=(2.0, 2.0),
                time_kind=TimeKind.CONTINUOUS_FLOW,
                dt=0.1,
            ),
            grid=ControlGrid.from_range(-2.0, 0.2, 2.0),
            dictionary=DictionaryConfig(k_centers=100, sigma=0.22),
            data=DataConfig(n_traj=500, traj_len=20, seed=seed),
            nsdmd=NsdmdConfig(max_iter=12000),
            # open-loop data concentrates in the wells, leaving the saddle
            # sparsely covered; a tight absorbing set plus a gentler decay
            # demand keeps the synthesis feasible on the fitted model
            stabilization=StabilizationConfig(
                targets=((0.5, 0.0),), gamma=1.01, r_att=0.25
            ),
        )
    if name == "standard_map":
        return PipelineConfig(
            name=name,
            system=SystemSpec(
                kind=SystemKind.STANDARD_MAP,
                params={"K": 0.25},
                state_dim=2,
                domain_lower=(0.0, 0.0),
                domain_upper=(1.0, 1.0),
                time_kind=TimeKind.DISCRETE_MAP,
            ),
            # the published grid prints as a single value; the preset widens it
            # symmetrically and records the correction in the manifest
            grid=ControlGrid.from_range(-0.5, 0.02, 0.5),
            dictionary=DictionaryConfig(k_centers=200, sigma=0.02),
            data=DataConfig(n_traj=1000, traj_len=10, seed=seed),
            nsdmd=NsdmdConfig(max_iter=6000),
            stabilization=StabilizationConfig(targets=((0.25, 0.5), (0.75, 0.5))),
        )
    raise ConfigError(f"unknown benchmark preset {name!r}")


PRESET_NAMES = ("cubic_logistic", "duffing", "double_well", "standard_map")

_PRESET_CORRECTIONS = {
    "standard_map": [
        "control grid widened to [-0.5:0.02:0.5]; the published table prints "
        "the degenerate range [0.5:0.02:0.5]"
    ],
}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _derived_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def build_centers(cfg: PipelineConfig, datasets) -> np.ndarray:
    """Dictionary centers from open-loop data (k-means or uniform grid).

    Grid mode spans the open-loop data range per axis, which keeps every
    basis element supported by samples.  With ``pin_attractor_centers`` the
    center nearest to each target is replaced by the target itself.
    """
    zero_idx = cfg.grid.index_nearest(np.zeros(cfg.grid.d))
    open_loop = datasets[zero_idx]
    pool = np.concatenate([open_loop.xs, open_loop.ys])
    if cfg.dictionary.center_mode == "grid":
        centers = grid_centers(pool.min(axis=0), pool.max(axis=0), cfg.dictionary.k_centers)
        if cfg.system.state_dim == 1:
            centers = np.linspace(
                pool.min(), pool.max(), cfg.dictionary.k_centers
            ).reshape(-1, 1)
    else:
        centers = kmeans(
            pool, cfg.dictionary.k_centers, seed=_derived_seed(cfg.data.seed, "kmeans")
        )
    order = np.lexsort(centers.T[::-1])
    centers = centers[order]
    if cfg.dictionary.pin_attractor_centers:
        taken = set()
        for t in cfg.stabilization.targets:
            d = np.linalg.norm(centers - np.asarray(t), axis=1)
            for j in np.argsort(d):
                if int(j) not in taken:
                    centers[int(j)] = np.asarray(t)
                    taken.add(int(j))
                    break
    return centers


def attractor_indices(cfg: PipelineConfig, rbf: RbfDictionary) -> np.ndarray:
    """Centers within r_att of any target, plus the nearest center per target."""
    idx = set()
    r = cfg.r_att()
    for t in cfg.stabilization.targets:
        d = np.linalg.norm(rbf.centers - np.asarray(t), axis=1)
        idx.update(int(j) for j in np.where(d <= r)[0])
        idx.add(int(np.argmin(d)))
    return np.asarray(sorted(idx), dtype=int)


def cost_matrix(cfg: PipelineConfig, rbf: RbfDictionary) -> np.ndarray:
    """Quadratic stage cost: squared distance to the target set + |u|^2."""
    targets = np.asarray(cfg.stabilization.targets, dtype=float)
    d2 = np.min(
        np.sum((rbf.centers[:, None, :] - targets[None, :, :]) ** 2, axis=2), axis=1
    )
    u2 = np.sum(cfg.grid.as_array() ** 2, axis=1)
    return d2[:, None] + u2[None, :]


def run_pipeline(cfg: PipelineConfig, strict: bool = True) -> PipelineResult:
    """Execute every stage into ``cfg.output_dir`` and return the results.

    Deterministic for a fixed config: reruns produce byte-identical occupation,
    policy, and certificate files.  On a stage failure the manifest is written
    with the stage name before the error propagates.
    """
    out = cfg.output_dir or os.path.join(_output_root(), cfg.name)
    os.makedirs(out, exist_ok=True)
    manifest: dict = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "versions": {
            "pfcontrol": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "corrections": _PRESET_CORRECTIONS.get(cfg.name, []),
        "stage_seconds": {},
        "diagnostics": {},
        "status": "running",
    }
    stage = "config"
    timings = manifest["stage_seconds"]
    try:
        t0 = time.perf_counter()
        stage = "data"
        datasets = generate_dataset(
            cfg.system,
            cfg.grid,
            cfg.data.n_traj,
            cfg.data.traj_len,
            cfg.data.seed,
            substeps=cfg.data.substeps,
        )
        for ds in datasets:
            write_dataset(ds, os.path.join(out, f"data_a{ds.action_index}.csv"))
        manifest["diagnostics"]["dropped_pairs"] = {
            str(ds.action_index): ds.n_dropped for ds in datasets
        }
        timings[stage] = round(time.perf_counter() - t0, 3)

        stage = "dictionary"
        t0 = time.perf_counter()
        centers = build_centers(cfg, datasets)
        rbf = RbfDictionary(
            centers=centers, sigma=cfg.dictionary.sigma, dim=cfg.system.state_dim
        )
        lam = lambda_matrix(rbf, OverlapMethod.CLOSED_FORM)
        save_dictionary(
            rbf,
            lam,
            os.path.join(out, "dictionary.csv"),
            os.path.join(out, "dictionary.json"),
        )
        _write_matrix(lam.lam, os.path.join(out, "lambda.csv"))
        manifest["diagnostics"]["overlap_condition"] = overlap_condition(lam)
        timings[stage] = round(time.perf_counter() - t0, 3)

        stage = "operators"
        t0 = time.perf_counter()
        p_list = []
        edmd_residuals = []
        nsdmd_residuals = []
        violations = []
        warm = None
        fit_seconds = []
        for ds in datasets:
            grams = gram_matrices(rbf, ds)
            edmd_residuals.append(fit_edmd_unconstrained(grams).fit_residual)
            t_fit = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # projection warnings go to the manifest
                koop, pf = fit_nsdmd(grams, lam, cfg.nsdmd, warm_start=warm)
            fit_seconds.append(round(time.perf_counter() - t_fit, 3))
            warm = koop.k_mat
            p_list.append(pf)
            nsdmd_residuals.append(koop.fit_residual)
            violations.append(
                {
                    "action": ds.action_index,
                    "constraint_violation": koop.constraint_violation,
                    "projection_deviation": pf.projection_deviation,
                    "iterations": koop.status.iterations if koop.status else None,
                    "converged": bool(koop.status and koop.status.optimal),
                }
            )
            save_operator(
                pf,
                os.path.join(out, f"operator_a{ds.action_index}.csv"),
                os.path.join(out, f"operator_a{ds.action_index}.json"),
                action_index=ds.action_index,
                residual=koop.fit_residual,
                violation=koop.constraint_violation,
                config_hash=manifest["config_hash"],
            )
        manifest["diagnostics"]["operator_fits"] = violations
        manifest["diagnostics"]["fit_seconds"] = fit_seconds
        manifest["diagnostics"]["edmd_residuals"] = edmd_residuals
        manifest["diagnostics"]["nsdmd_residuals"] = nsdmd_residuals
        timings[stage] = round(time.perf_counter() - t0, 3)

        stage = "synthesize"
        t0 = time.perf_counter()
        bank = OperatorBank(actions=cfg.grid, p_list=p_list, dictionary_ref="dictionary.csv")
        att = attractor_indices(cfg, rbf)
        prob = StabilizationProblem(
            attractor_indices=att,
            gamma=cfg.stabilization.gamma,
            cost_values=cost_matrix(cfg, rbf),
            normalize_flag=cfg.stabilization.normalize_flag,
        )
        occ = solve_stabilization(bank, prob)
        manifest["diagnostics"]["lp_status"] = occ.status.state.value
        manifest["diagnostics"]["lp_objective"] = occ.objective
        manifest["diagnostics"]["balance_residual"] = occ.balance_residual
        manifest["diagnostics"]["attractor_indices"] = [int(i) for i in att]
        _write_matrix(occ.theta, os.path.join(out, "theta.csv"))
        timings[stage] = round(time.perf_counter() - t0, 3)
        if occ.status.state != SolveState.OPTIMAL:
            raise SolverFailure(
                f"stabilization LP returned {occ.status.state.value}: {occ.status.message}"
            )

        stage = "policy"
        t0 = time.perf_counter()
        policy = extract_policy(
            occ,
            bank,
            prob,
            feedback_mode=FeedbackMode(cfg.stabilization.feedback_mode),
            grid_snap=cfg.stabilization.grid_snap,
        )
        save_policy(policy, rbf, os.path.join(out, "policy.csv"))
        manifest["diagnostics"]["flagged_rows"] = [int(i) for i in policy.flagged]
        timings[stage] = round(time.perf_counter() - t0, 3)

        stage = "certificate"
        t0 = time.perf_counter()
        p_cl = closed_loop_pf(bank, policy)
        cert = lyapunov_certificate(p_cl, prob)
        save_certificate(
            cert,
            os.path.join(out, "certificate.json"),
            extra={
                "attractor_indices": [int(i) for i in att],
                "balance_residual": occ.balance_residual,
                "lp_objective": occ.objective,
                "recomputed_cost": evaluate_cost(occ, prob, bank),
            },
        )
        _write_mu_bar(cert, rbf, att, os.path.join(out, "mu_bar.csv"))
        manifest["diagnostics"]["certificate_pass"] = cert.passed
        manifest["diagnostics"]["spectral_radius"] = cert.spectral_radius
        timings[stage] = round(time.perf_counter() - t0, 3)

        manifest["status"] = "ok" if cert.passed else "certificate_failed"
        manifest["created_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        _write_json(manifest, os.path.join(out, "manifest.json"))
        if strict and not cert.passed:
            raise VerificationFailure(
                f"closed-loop certificate failed: spectral radius {cert.spectral_radius:.10g}"
            )
        return PipelineResult(
            config=cfg,
            bundle_dir=out,
            rbf=rbf,
            bank=bank,
            problem=prob,
            occupation=occ,
            policy=policy,
            certificate=cert,
            manifest=manifest,
            edmd_residuals=edmd_residuals,
            nsdmd_residuals=nsdmd_residuals,
        )
    except Exception as exc:
        if manifest["status"] == "running":
            manifest["status"] = "failed"
            manifest["failed_stage"] = stage
            manifest["error"] = f"{type(exc).__name__}: {exc}"
            manifest["created_utc"] = time.strftime(
                "%Y-%m-%dT%H:%M:%SZ", time.gmtime()
            )
            _write_json(manifest, os.path.join(out, "manifest.json"))
        raise


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate(
    spec: SystemSpec,
    rbf: RbfDictionary,
    policy: Policy,
    initial_states,
    horizon: int,
    mode: str = "closed_loop",
    targets=((0.0,),),
    conv_radius: float = 0.05,
    dwell: int = 5,
    substeps: int = 10,
    grid: ControlGrid | None = None,
) -> list[RolloutRecord]:
    """Roll initial states forward under zero control or the feedback law.

    Convergence means staying within ``conv_radius`` of the target set for
    ``dwell`` consecutive steps; a non-finite state aborts that rollout.
    """
    targets = np.asarray(targets, dtype=float)
    records = []
    d = policy.u_values.shape[1]
    for x0 in np.atleast_2d(np.asarray(initial_states, dtype=float)):
        states = [x0.copy()]
        controls = []
        diverged = False
        x = x0.copy()
        for _ in range(horizon):
            if mode == "closed_loop":
                u = feedback(policy, rbf, x, grid=grid)
            else:
                u = np.zeros(d)
            try:
                x = advance(spec, x, u, substeps=substeps)
            except Exception:
                diverged = True
                break
            if not np.all(np.isfinite(x)):
                diverged = True
                break
            controls.append(np.atleast_1d(u))
            states.append(x.copy())
        states_arr = np.asarray(states)
        controls_arr = (
            np.asarray(controls) if controls else np.zeros((0, d))
        )
        dist = np.min(
            np.linalg.norm(states_arr[:, None, :] - targets[None, :, :], axis=2),
            axis=1,
        )
        converged, step = _dwell_converged(dist, conv_radius, dwell)
        records.append(
            RolloutRecord(
                mode=mode,
                initial_state=x0.copy(),
                states=states_arr,
                controls=controls_arr,
                converged=converged and not diverged,
                steps_to_converge=step,
                diverged=diverged,
            )
        )
    return records


def _dwell_converged(dist: np.ndarray, radius: float, dwell: int):
    inside = dist <= radius
    if len(inside) == 0:
        return False, None
    run = 0
    for i, ok in enumerate(inside):
        run = run + 1 if ok else 0
        if run >= min(dwell, len(inside)):
            return True, i - run + 1
    return False, None


def rollout_files(records: list[RolloutRecord], prob_gamma: float, cost_fn, out_dir, mode: str):
    """Write trajectory and control/cost time series for one rollout batch."""
    qdim = records[0].states.shape[1] if records else 0
    with open(os.path.join(out_dir, f"trajectories_{mode}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rollout", "step"] + [f"x{i}" for i in range(qdim)])
        for r, rec in enumerate(records):
            for t, xs in enumerate(rec.states):
                writer.writerow([r, t] + [repr(float(v)) for v in xs])
    with open(os.path.join(out_dir, f"controls_{mode}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rollout", "step", "u", "stage_cost", "discounted_total"])
        for r, rec in enumerate(records):
            total = 0.0
            for t, u in enumerate(rec.controls):
                c = cost_fn(rec.states[t], u)
                total += prob_gamma**t * c
                writer.writerow(
                    [r, t, repr(float(u[0])), repr(float(c)), repr(float(total))]
                )
    with open(os.path.join(out_dir, f"rollout_summary_{mode}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["rollout"]
            + [f"x0_{i}" for i in range(qdim)]
            + ["converged", "steps_to_converge", "diverged"]
        )
        for r, rec in enumerate(records):
            writer.writerow(
                [r]
                + [repr(float(v)) for v in rec.initial_state]
                + [int(rec.converged), "" if rec.steps_to_converge is None else rec.steps_to_converge, int(rec.diverged)]
            )


_REPRODUCE_HORIZON = {
    "cubic_logistic": 60,
    "duffing": 250,
    "double_well": 250,
    "standard_map": 300,
}

_REPRODUCE_N_RANDOM = {
    "cubic_logistic": 50,
    "duffing": 20,
    "double_well": 20,
    "standard_map": 20,
}


def reproduce(
    name: str,
    output_dir: str | None = None,
    seed: int = 7,
    overrides: dict | None = None,
    strict: bool = True,
) -> tuple[PipelineResult, dict]:
    """Run a benchmark preset end to end and emit rollout data files."""
    cfg = preset(name, seed=seed)
    if overrides:
        for key, value in overrides.items():
            section, _, fieldname = key.partition(".")
            target = getattr(cfg, section, None)
            if target is None or not hasattr(target, fieldname):
                raise ConfigError(f"unknown override {key}")
            setattr(target, fieldname, value)
    cfg.output_dir = output_dir or os.path.join(_output_root(), name)
    result = run_pipeline(cfg, strict=strict)
    summary = emit_rollouts(result)
    return result, summary


def emit_rollouts(result: PipelineResult) -> dict:
    cfg = result.config
    name = cfg.name
    horizon = _REPRODUCE_HORIZON.get(name, 200)
    n_random = _REPRODUCE_N_RANDOM.get(name, 20)
    rng = np.random.default_rng(_derived_seed(cfg.data.seed, "rollout-ics"))
    ics = rng.uniform(
        cfg.system.lower, cfg.system.upper, size=(n_random, cfg.system.state_dim)
    )
    targets = np.asarray(cfg.stabilization.targets, dtype=float)
    gamma = cfg.stabilization.gamma

    def stage_cost(x, u):
        d2 = float(np.min(np.sum((targets - x) ** 2, axis=1)))
        return d2 + float(np.sum(np.asarray(u) ** 2))

    summary = {}
    for mode in ("open_loop", "closed_loop"):
        records = simulate(
            cfg.system,
            result.rbf,
            result.policy,
            ics,
            horizon,
            mode=mode,
            targets=targets,
            conv_radius=cfg.r_att(),
            substeps=cfg.data.substeps,
            grid=cfg.grid,
        )
        rollout_files(records, gamma, stage_cost, result.bundle_dir, mode)
        summary[mode] = {
            "n": len(records),
            "converged": sum(r.converged for r in records),
            "diverged": sum(r.diverged for r in records),
        }
    return summary


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def verify(bundle_dir: str, tol: float = 1e-6) -> dict:
    """Re-check a bundle: operator structure, balance residual, certificate.

    Returns the report; raises :class:`VerificationFailure` (or
    :class:`MissingArtifacts`) when a check fails, after writing mu_bar.csv
    and the report.
    """
    manifest_path = os.path.join(bundle_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingArtifacts(["manifest.json"])
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    cfg = PipelineConfig.from_dict(manifest["config"])
    m_actions = len(cfg.grid)
    required = (
        ["dictionary.csv", "dictionary.json", "lambda.csv", "theta.csv", "policy.csv", "certificate.json"]
        + [f"operator_a{a}.csv" for a in range(1, m_actions + 1)]
        + [f"data_a{a}.csv" for a in range(1, m_actions + 1)]
    )
    missing = [f for f in required if not os.path.exists(os.path.join(bundle_dir, f))]
    if missing:
        raise MissingArtifacts(missing)

    rbf = load_dictionary(
        os.path.join(bundle_dir, "dictionary.csv"),
        os.path.join(bundle_dir, "dictionary.json"),
    )
    failures = []
    p_list = []
    for a in range(1, m_actions + 1):
        pf, _ = load_operator(os.path.join(bundle_dir, f"operator_a{a}.csv"))
        report = validate_markov(pf, tol)
        p_list.append(pf)
        if not report.passed:
            failures.append(
                f"operator a{a}: min entry {-report.max_negative_entry:.3e}, "
                f"column-sum deviation {report.max_column_sum_deviation:.3e}"
            )
    bank = OperatorBank(actions=cfg.grid, p_list=p_list)
    att = np.asarray(manifest["diagnostics"]["attractor_indices"], dtype=int)
    prob = StabilizationProblem(
        attractor_indices=att,
        gamma=cfg.stabilization.gamma,
        cost_values=cost_matrix(cfg, rbf),
        normalize_flag=cfg.stabilization.normalize_flag,
    )
    theta = _read_matrix(os.path.join(bundle_dir, "theta.csv"))
    keep = prob.non_attractor_indices(bank.size)
    balance = -prob.m_vec.copy()
    for a_idx in range(m_actions):
        p1 = restrict_operator(bank.p_list[a_idx], att)
        balance -= prob.gamma * p1 @ theta[:, a_idx] - theta[:, a_idx]
    balance_residual = float(np.max(np.abs(balance))) if keep.size else 0.0
    if balance_residual > max(10 * tol, 1e-6):
        failures.append(f"balance residual {balance_residual:.3e} exceeds {max(10 * tol, 1e-6):.0e}")

    policy = load_policy(
        os.path.join(bundle_dir, "policy.csv"),
        att,
        feedback_mode=FeedbackMode(cfg.stabilization.feedback_mode),
        grid_snap=cfg.stabilization.grid_snap,
    )
    p_cl = closed_loop_pf(bank, policy)
    cert = lyapunov_certificate(p_cl, prob)
    with open(os.path.join(bundle_dir, "certificate.json")) as fh:
        stored = json.load(fh)
    if bool(stored.get("pass")) != cert.passed:
        failures.append(
            f"stored certificate pass={stored.get('pass')} but recomputation says {cert.passed}"
        )
    if not cert.passed:
        failures.append(
            f"closed-loop certificate fails (spectral radius {cert.spectral_radius:.10g})"
        )
    _write_mu_bar(cert, rbf, att, os.path.join(bundle_dir, "mu_bar.csv"))

    report = {
        "passed": not failures,
        "failures": failures,
        "balance_residual": balance_residual,
        "spectral_radius": cert.spectral_radius,
        "certificate_pass": cert.passed,
        "spectral_radius_str": f"{cert.spectral_radius:.10g}",
    }
    _write_json(report, os.path.join(bundle_dir, "verify_report.json"))
    if failures:
        raise VerificationFailure("; ".join(failures))
    return report


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


def _write_matrix(mat: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(mat):
            writer.writerow([f"{v:.17g}" for v in row])


def _read_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.asarray(
            [[float(v) for v in row] for row in csv.reader(fh) if row]
        )


def _write_json(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_mu_bar(cert: LyapunovCertificate, rbf: RbfDictionary, att, path) -> None:
    keep = np.setdiff1d(np.arange(rbf.size), np.asarray(att, dtype=int))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"center{i}" for i in range(rbf.dim)] + ["mu"])
        if cert.mu_bar is None:
            return
        for j, mu in zip(keep, cert.mu_bar):
            writer.writerow(
                [repr(float(v)) for v in rbf.centers[j]] + [repr(float(mu))]
            )
