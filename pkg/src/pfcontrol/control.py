"""Stabilizing-controller synthesis over a bank of per-action transfer matrices.

The decision variable is the occupation matrix theta (non-attractor states x
actions).  The balance equalities couple the discounted, policy-averaged
restricted transfer matrices to a reference mass vector; the minimizer's
row-wise argmax yields a deterministic policy, which is verified by solving
for a nonnegative decaying measure of the closed loop.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dictionary import RbfDictionary, eval_dictionary
from .operator import PFMatrix
from .optim import LpProblem, SolveState, SolveStatus, solve_lp
from .systems import ControlGrid


class ControlError(Exception):
    pass


class AllStatesAttractor(ControlError):
    pass


class MissingAction(ControlError):
    pass


class PowerIterationStall(ControlError):
    pass


class FeedbackMode(str, enum.Enum):
    PAPER_SUM = "paper_sum"
    PARTITION_OF_UNITY = "partition_of_unity"
    NEAREST_CENTER = "nearest_center"


@dataclass
class OperatorBank:
    """Per-action column-stochastic transfer matrices over one dictionary."""

    actions: ControlGrid
    p_list: list  # list of PFMatrix, length M
    dictionary_ref: str = ""

    def __post_init__(self):
        if len(self.p_list) != len(self.actions):
            raise ValueError("need one operator per control value")
        sizes = {p.p_mat.shape for p in self.p_list}
        if len(sizes) != 1:
            raise ValueError("operators must share dimensions")

    @property
    def size(self) -> int:
        return self.p_list[0].p_mat.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.p_list)

    def zero_action_index(self) -> int:
        """0-based index of the control value closest to zero."""
        return self.actions.index_nearest(np.zeros(self.actions.d))


@dataclass
class StabilizationProblem:
    """Data defining one synthesis instance.

    ``cost_values`` holds the stage cost evaluated at (center_l, u_a) as a
    K x M matrix; it must be nonnegative and vanish on the attractor rows in
    the zero-control column.  ``m_vec`` is the reference mass over
    non-attractor indices (defaults to all ones).
    """

    attractor_indices: np.ndarray
    gamma: float
    cost_values: np.ndarray
    m_vec: np.ndarray | None = None
    normalize_flag: bool = False
    slack_floor: float = 1e-6

    def __post_init__(self):
        self.attractor_indices = np.unique(
            np.asarray(self.attractor_indices, dtype=int)
        )
        if self.attractor_indices.size == 0:
            raise ValueError("attractor index set must be nonempty")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        self.cost_values = np.atleast_2d(np.asarray(self.cost_values, dtype=float))
        if np.min(self.cost_values) < 0:
            raise ValueError("stage cost must be nonnegative")
        k = self.cost_values.shape[0]
        if self.attractor_indices.min() < 0 or self.attractor_indices.max() >= k:
            raise ValueError("attractor indices out of range")
        n = k - self.attractor_indices.size
        if self.m_vec is None:
            self.m_vec = np.ones(n)
        else:
            self.m_vec = np.asarray(self.m_vec, dtype=float).ravel()
            if self.m_vec.shape != (n,):
                raise ValueError(f"m_vec must have length {n}")
            if np.min(self.m_vec) < 0 or not np.any(self.m_vec):
                raise ValueError("m_vec must be nonnegative and nonzero")

    def non_attractor_indices(self, k: int) -> np.ndarray:
        mask = np.ones(k, dtype=bool)
        mask[self.attractor_indices] = False
        return np.where(mask)[0]


@dataclass
class OccupationSolution:
    theta: np.ndarray  # (K - |attractor|, M), nonnegative
    objective: float
    status: SolveStatus
    balance_residual: float = float("nan")
    slack_mass: np.ndarray | None = None


@dataclass
class Policy:
    """Deterministic action assignment per basis element.

    ``action_of`` maps every basis index to a 0-based action index; attractor
    indices are pinned to zero control regardless of the grid.  ``u_values``
    caches the control vector applied at each center.
    """

    action_of: np.ndarray
    attractor_indices: np.ndarray
    u_values: np.ndarray  # (K, d)
    feedback_mode: FeedbackMode = FeedbackMode.PARTITION_OF_UNITY
    grid_snap: bool = False
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class LyapunovCertificate:
    mu_bar: np.ndarray | None
    spectral_radius: float
    decay_bound: float
    passed: bool
    gamma: float
    min_mu: float = float("nan")
    residual: float = float("nan")


def restrict_operator(p, attractor_indices) -> np.ndarray:
    """Delete attractor rows and columns, leaving the sub-stochastic block."""
    p_mat = p.p_mat if isinstance(p, PFMatrix) else np.asarray(p, dtype=float)
    k = p_mat.shape[0]
    idx = np.unique(np.asarray(attractor_indices, dtype=int))
    if idx.size >= k:
        raise AllStatesAttractor("attractor set covers every basis element")
    keep = np.setdiff1d(np.arange(k), idx)
    return p_mat[np.ix_(keep, keep)]


def assemble_lp(bank: OperatorBank, prob: StabilizationProblem) -> LpProblem:
    """Build the occupation-measure LP.

    Variables are theta columns stacked per action.  The balance equalities
    are the forward (visitation) form: per-state occupation equals the
    reference mass plus the discounted inflow from source cells evolving
    under their own occupation-weighted actions.  That orientation keeps a
    basic optimal solution exactly one action per state, the policy taken
    from it identical to the physical closed loop, and the decaying-measure
    certificate implied by feasibility.  With ``normalize_flag`` the mass
    vector becomes a floored slack variable and the per-state total
    occupation is pinned to one.
    """
    k = bank.size
    if prob.cost_values.shape != (k, bank.n_actions):
        raise ValueError("cost matrix must be K x M")
    keep = prob.non_attractor_indices(k)
    n = keep.size
    m_actions = bank.n_actions
    gamma = prob.gamma

    blocks = []
    for p in bank.p_list:
        p1 = restrict_operator(p, prob.attractor_indices)
        blocks.append(gamma * p1 - np.eye(n))
    balance = np.hstack(blocks)  # (n, n*M)
    cost = prob.cost_values[keep, :].flatten(order="F")

    if not prob.normalize_flag:
        return LpProblem(c=cost, a_eq=balance, b_eq=-prob.m_vec)

    # Slack mass: balance + m = 0, per-state occupation sums to one, m >= floor.
    a_top = np.hstack([balance, np.eye(n)])
    a_bot = np.hstack([np.tile(np.eye(n), (1, m_actions)), np.zeros((n, n))])
    a_eq = np.vstack([a_top, a_bot])
    b_eq = np.concatenate([np.zeros(n), np.ones(n)])
    c = np.concatenate([cost, np.zeros(n)])
    lb = np.concatenate([np.zeros(n * m_actions), np.full(n, prob.slack_floor)])
    return LpProblem(c=c, a_eq=a_eq, b_eq=b_eq, lb=lb)


def solve_stabilization(
    bank: OperatorBank,
    prob: StabilizationProblem,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> OccupationSolution:
    """Solve the LP and reshape the occupation variables."""
    lp = assemble_lp(bank, prob)
    z, status = solve_lp(lp, tol=tol, max_iter=max_iter)
    k = bank.size
    n = k - prob.attractor_indices.size
    m_actions = bank.n_actions
    theta = z[: n * m_actions].reshape((n, m_actions), order="F")
    slack = z[n * m_actions :] if prob.normalize_flag else None
    if status.state == SolveState.INFEASIBLE:
        status.message = (
            "no stabilizing randomized policy exists at this discount in this "
            "basis; lower gamma. " + status.message
        )
    m_vec = slack if prob.normalize_flag else prob.m_vec
    balance = np.zeros(n)
    for a, p in enumerate(bank.p_list):
        p1 = restrict_operator(p, prob.attractor_indices)
        balance += prob.gamma * p1 @ theta[:, a] - theta[:, a]
    residual = float(np.max(np.abs(balance + m_vec))) if n else 0.0
    objective = float(
        np.sum(prob.cost_values[prob.non_attractor_indices(k), :] * theta)
    )
    return OccupationSolution(
        theta=theta,
        objective=objective,
        status=status,
        balance_residual=residual,
        slack_mass=slack,
    )


def extract_policy(
    sol: OccupationSolution,
    bank: OperatorBank,
    prob: StabilizationProblem,
    feedback_mode: FeedbackMode = FeedbackMode.PARTITION_OF_UNITY,
    grid_snap: bool = False,
) -> Policy:
    """Row-wise argmax of the occupation matrix, ties toward smaller actions.

    Rows whose occupation mass is below 1e-12 (never visited under the
    reference mass) fall back to the cheapest one-step action and are flagged.
    """
    k = bank.size
    keep = prob.non_attractor_indices(k)
    actions = np.zeros(k, dtype=int)
    zero_a = bank.zero_action_index()
    actions[prob.attractor_indices] = zero_a
    flagged = []
    for row, j in enumerate(keep):
        theta_row = sol.theta[row]
        if float(theta_row.max()) < 1e-12:
            actions[j] = int(np.argmin(prob.cost_values[j]))
            flagged.append(j)
        else:
            actions[j] = int(np.argmax(theta_row))
    grid_arr = bank.actions.as_array()
    u_values = grid_arr[actions].astype(float)
    u_values[prob.attractor_indices] = 0.0
    return Policy(
        action_of=actions,
        attractor_indices=prob.attractor_indices.copy(),
        u_values=u_values,
        feedback_mode=feedback_mode,
        grid_snap=grid_snap,
        flagged=np.asarray(flagged, dtype=int),
    )


def feedback(policy: Policy, rbf: RbfDictionary, x, grid: ControlGrid | None = None):
    """Evaluate the synthesized feedback law at a state.

    ``paper_sum`` is the raw basis-weighted sum of per-center controls,
    ``partition_of_unity`` normalizes by the total basis weight, and
    ``nearest_center`` looks up the dominant basis element.  ``grid_snap``
    rounds the result to the nearest grid value.
    """
    psi = eval_dictionary(rbf, x)
    mode = policy.feedback_mode
    if mode == FeedbackMode.NEAREST_CENTER:
        u = policy.u_values[int(np.argmax(psi))].copy()
    elif mode == FeedbackMode.PAPER_SUM:
        u = psi @ policy.u_values
    elif mode == FeedbackMode.PARTITION_OF_UNITY:
        total = float(psi.sum())
        u = psi @ policy.u_values / total if total > 0 else np.zeros(policy.u_values.shape[1])
    else:
        raise ValueError(f"unknown feedback mode {mode}")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if policy.grid_snap and grid is not None:
        u = np.asarray(grid.values[grid.index_nearest(u)], dtype=float)
    return u


def closed_loop_pf(bank: OperatorBank, policy: Policy) -> PFMatrix:
    """Column j of the closed loop comes from the operator of action a(j)."""
    k = bank.size
    if policy.action_of.shape != (k,):
        raise MissingAction("policy does not cover every basis element")
    if np.any(policy.action_of < 0) or np.any(policy.action_of >= bank.n_actions):
        raise MissingAction("policy references an action outside the bank")
    p_cl = np.empty((k, k))
    zero_a = bank.zero_action_index()
    for j in range(k):
        a = policy.action_of[j]
        if j in policy.attractor_indices:
            a = zero_a
        p_cl[:, j] = bank.p_list[a].p_mat[:, j]
    return PFMatrix(p_mat=p_cl)


def spectral_radius_power(mat: np.ndarray, tol: float = 1e-10, max_iter: int = 100000) -> float:
    """Power iteration with a +1/2 diagonal shift (handles periodic chains)."""
    n = mat.shape[0]
    if n == 0:
        return 0.0
    if not np.all(np.isfinite(mat)):
        raise PowerIterationStall("matrix has non-finite entries")
    shift = 0.5 * float(np.max(np.abs(mat))) + 0.5
    shifted = mat + shift * np.eye(n)
    v = np.full(n, 1.0 / np.sqrt(n))
    lam_old = 0.0
    for _ in range(max_iter):
        w = shifted @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0  # nilpotent-with-shift cannot happen; zero matrix case
        v = w / norm
        lam = float(v @ (shifted @ v))
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            return abs(lam - shift)
        lam_old = lam
    raise PowerIterationStall("power iteration did not converge")


def lyapunov_certificate(
    p_cl: PFMatrix,
    prob: StabilizationProblem,
    tol: float = 1e-8,
) -> LyapunovCertificate:
    """Check geometric decay of the restricted closed loop.

    Passes iff the spectral radius of gamma times the restricted matrix is
    below one and the induced nonnegative measure solving
    (I - gamma P1') mu = m stays nonnegative.
    """
    p1 = restrict_operator(p_cl, prob.attractor_indices)
    gamma = prob.gamma
    try:
        rho = gamma * spectral_radius_power(p1)
    except PowerIterationStall:
        return LyapunovCertificate(
            mu_bar=None,
            spectral_radius=float("nan"),
            decay_bound=1.0 / gamma,
            passed=False,
            gamma=gamma,
        )
    if rho >= 1.0:
        return LyapunovCertificate(
            mu_bar=None,
            spectral_radius=rho,
            decay_bound=1.0 / gamma,
            passed=False,
            gamma=gamma,
        )
    n = p1.shape[0]
    mu = scipy.linalg.solve(np.eye(n) - gamma * p1.T, prob.m_vec)
    residual = float(np.max(np.abs((np.eye(n) - gamma * p1.T) @ mu - prob.m_vec)))
    min_mu = float(mu.min()) if n else 0.0
    return LyapunovCertificate(
        mu_bar=mu,
        spectral_radius=rho,
        decay_bound=1.0 / gamma,
        passed=min_mu >= -tol,
        gamma=gamma,
        min_mu=min_mu,
        residual=residual,
    )


def evaluate_cost(sol: OccupationSolution, prob: StabilizationProblem, bank: OperatorBank) -> float:
    """Recompute the LP objective from the occupation matrix."""
    keep = prob.non_attractor_indices(bank.size)
    if sol.theta.shape != (keep.size, bank.n_actions):
        raise ValueError("occupation matrix has wrong shape")
    return float(np.sum(prob.cost_values[keep, :] * sol.theta))


def save_policy(policy: Policy, rbf: RbfDictionary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["basis_index"]
            + [f"center{i}" for i in range(rbf.dim)]
            + ["action_index", "control_value"]
        )
        for j in range(rbf.size):
            writer.writerow(
                [j]
                + [repr(float(v)) for v in rbf.centers[j]]
                + [int(policy.action_of[j]) + 1]
                + [repr(float(policy.u_values[j, 0]))]
            )


def load_policy(
    path,
    attractor_indices,
    feedback_mode: FeedbackMode = FeedbackMode.PARTITION_OF_UNITY,
    grid_snap: bool = False,
) -> Policy:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = [r for r in rows[1:] if r]
    actions = np.asarray([int(r[-2]) - 1 for r in body], dtype=int)
    u_values = np.asarray([[float(r[-1])] for r in body])
    return Policy(
        action_of=actions,
        attractor_indices=np.asarray(attractor_indices, dtype=int),
        u_values=u_values,
        feedback_mode=feedback_mode,
        grid_snap=grid_snap,
    )


def save_certificate(cert: LyapunovCertificate, path, extra: dict | None = None) -> None:
    doc = {
        "gamma": cert.gamma,
        "spectral_radius": cert.spectral_radius,
        "decay_bound": cert.decay_bound,
        "pass": cert.passed,
        "min_mu": cert.min_mu,
        "residual": cert.residual,
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
