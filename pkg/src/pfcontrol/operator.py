"""Transfer-operator fitting from snapshot Gram matrices.

``fit_edmd_unconstrained`` gives the plain least-squares (EDMD) baseline.
``fit_nsdmd`` solves the same objective subject to elementwise nonnegativity
of the fitted matrix and of its overlap-similarity transform plus the
transform's row sums equalling one, which makes the dual matrix
P = S^-1 K' S a column-stochastic (Markov) matrix.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dictionary import LambdaMatrix
from .optim import SolveState, SolveStatus, markov_constrained_lstsq


class OperatorError(Exception):
    pass


class SingularLambda(OperatorError):
    pass


@dataclass
class NsdmdConfig:
    tol_feas: float = 1e-8
    tol_opt: float = 1e-7
    max_iter: int = 20000
    post_project: bool = True

    def __post_init__(self):
        if self.tol_feas <= 0 or self.tol_opt <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class KoopmanMatrix:
    k_mat: np.ndarray
    fit_residual: float
    constraint_violation: float
    rank_deficient: bool = False
    status: SolveStatus | None = None


@dataclass
class PFMatrix:
    p_mat: np.ndarray
    projection_deviation: float = 0.0

    @property
    def size(self) -> int:
        return self.p_mat.shape[0]


@dataclass
class MarkovReport:
    max_negative_entry: float
    max_column_sum_deviation: float
    passed: bool


def _overlap_array(lam) -> np.ndarray:
    return lam.lam if isinstance(lam, LambdaMatrix) else np.asarray(lam, dtype=float)


def fit_edmd_unconstrained(grams) -> KoopmanMatrix:
    """Least-squares baseline K0 = pinv(G) A with a 1e-10 singular cutoff."""
    g = grams.g_mat
    if not np.any(g):
        raise OperatorError("G is identically zero")
    w = scipy.linalg.eigvalsh(g)
    rank = int(np.sum(w > 1e-10 * w[-1]))
    k0 = np.linalg.pinv(g, rcond=1e-10, hermitian=True) @ grams.a_mat
    residual = float(np.linalg.norm(g @ k0 - grams.a_mat, "fro"))
    return KoopmanMatrix(
        k_mat=k0,
        fit_residual=residual,
        constraint_violation=max(0.0, -float(k0.min())),
        rank_deficient=rank < g.shape[0],
    )


def pf_from_koopman(k, lam) -> PFMatrix:
    """Exact duality transform P = S^-1 K' S; no projection applied."""
    k_mat = k.k_mat if isinstance(k, KoopmanMatrix) else np.asarray(k, dtype=float)
    s = _overlap_array(lam)
    try:
        fac = scipy.linalg.cho_factor(s, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularLambda("overlap matrix is not positive definite") from exc
    p = scipy.linalg.cho_solve(fac, k_mat.T @ s, check_finite=False)
    return PFMatrix(p_mat=p)


def koopman_from_pf(p, lam) -> np.ndarray:
    """Inverse of the duality transform, K = (S P S^-1)'."""
    p_mat = p.p_mat if isinstance(p, PFMatrix) else np.asarray(p, dtype=float)
    s = _overlap_array(lam)
    fac = scipy.linalg.cho_factor(s, check_finite=False)
    return scipy.linalg.cho_solve(fac, (s @ p_mat).T, check_finite=False)


def fit_nsdmd(
    grams,
    lam: LambdaMatrix,
    cfg: NsdmdConfig | None = None,
    warm_start: np.ndarray | None = None,
) -> tuple[KoopmanMatrix, PFMatrix]:
    """Constrained least-squares operator fit.

    Solves min ||G K - A||_F over K >= 0 with the similarity transform of K
    constrained to be (row-)Markov, then maps to the column-stochastic dual
    matrix.  With ``post_project`` the dual matrix is clipped and column
    renormalized; a projection that moves any entry by more than 1e-6 hints
    at a bad fit and raises a warning.
    """
    cfg = cfg or NsdmdConfig()
    s = _overlap_array(lam)
    if warm_start is None:
        warm_start = np.maximum(fit_edmd_unconstrained(grams).k_mat, 0.0)
    result = markov_constrained_lstsq(
        grams.g_mat,
        grams.a_mat,
        s,
        tol_feas=cfg.tol_feas,
        tol_opt=cfg.tol_opt,
        max_iter=cfg.max_iter,
        warm_start=warm_start,
    )
    violation = max(
        0.0,
        -result.min_entry,
        -result.transform_min_entry,
        result.row_sum_deviation,
    )
    status = SolveStatus(
        state=SolveState.OPTIMAL if result.converged else SolveState.MAX_ITER,
        objective=0.5 * result.residual**2,
        primal_feas=violation,
        dual_gap=float("nan"),
        iterations=result.iterations,
    )
    koopman = KoopmanMatrix(
        k_mat=result.k_mat,
        fit_residual=result.residual,
        constraint_violation=violation,
        status=status,
    )
    pf = pf_from_koopman(koopman, lam)
    if cfg.post_project:
        pf = project_to_markov(pf)
        if pf.projection_deviation > 1e-6:
            warnings.warn(
                f"stochasticity projection moved entries by "
                f"{pf.projection_deviation:.3e}; the constrained fit may be poor",
                stacklevel=2,
            )
    return koopman, pf


def project_to_markov(pf: PFMatrix) -> PFMatrix:
    """Clip negatives and renormalize columns to sum exactly to one."""
    raw = pf.p_mat
    p = np.maximum(raw, 0.0)
    sums = p.sum(axis=0)
    degenerate = sums < 1e-12
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} column(s) lost all mass in projection; "
            "placing it on the diagonal",
            stacklevel=2,
        )
        idx = np.where(degenerate)[0]
        p[idx, idx] = 1.0
        sums = p.sum(axis=0)
    p = p / sums
    return PFMatrix(p_mat=p, projection_deviation=float(np.max(np.abs(p - raw))))


def validate_markov(p, tol: float = 1e-6) -> MarkovReport:
    """Diagnostic for column-stochastic structure; never raises."""
    p_mat = p.p_mat if isinstance(p, PFMatrix) else np.asarray(p, dtype=float)
    neg = max(0.0, -float(p_mat.min()))
    dev = float(np.max(np.abs(p_mat.sum(axis=0) - 1.0)))
    return MarkovReport(
        max_negative_entry=neg,
        max_column_sum_deviation=dev,
        passed=neg <= tol and dev <= tol,
    )


def save_operator(pf: PFMatrix, path_csv, path_meta, *, action_index: int,
                  residual: float, violation: float, config_hash: str = "") -> None:
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in pf.p_mat:
            writer.writerow([f"{v:.17g}" for v in row])
    meta = {
        "action_index": action_index,
        "fit_residual": residual,
        "constraint_violation": violation,
        "projection_deviation": pf.projection_deviation,
        "config_hash": config_hash,
    }
    with open(path_meta, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_operator(path_csv, path_meta=None) -> tuple[PFMatrix, dict]:
    with open(path_csv, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    meta = {}
    if path_meta is not None:
        with open(path_meta) as fh:
            meta = json.load(fh)
    return PFMatrix(p_mat=np.asarray(rows)), meta
