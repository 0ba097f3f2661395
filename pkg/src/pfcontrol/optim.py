"""Dense linear- and quadratic-program kernels.

Three entry points:

* :func:`solve_lp` -- Mehrotra predictor-corrector interior point for
  ``min c'z  s.t.  A_eq z = b_eq, z >= lb``.  Infeasibility is certified via a
  phase-1 solve whose dual yields a Farkas ray; unboundedness via a bounded
  ray search.  Everything is deterministic (no randomized pivoting).
* :func:`solve_qp` -- operator-splitting (ADMM) solver for dense convex QPs
  with equalities and one-sided inequalities, finished by an active-set
  polish step to reach tight KKT residuals.
* :func:`markov_constrained_lstsq` -- specialized ADMM for the matrix problem
  ``min 0.5 ||G K - A||_F^2`` subject to elementwise nonnegativity of ``K``
  and of ``S K S^-1`` and to row sums ``S K S^-1 1 = 1``.  Flattening this to
  the K^2-variable QP carrier materializes Kronecker blocks of size K^2 x K^2
  (dense, ~13 GB at K = 200), so the solver works in matrix form instead; the
  two formulations are checked against each other at small K in the tests.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class OptimError(Exception):
    pass


class SolveState(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


@dataclass
class SolveStatus:
    state: SolveState
    objective: float
    primal_feas: float
    dual_gap: float
    iterations: int
    certificate: np.ndarray | None = None
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.state == SolveState.OPTIMAL


@dataclass(frozen=True)
class LpProblem:
    """min c'z  s.t.  a_eq z = b_eq, z >= lb (lb finite, defaults to zero)."""

    c: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        a = np.atleast_2d(np.asarray(self.a_eq, dtype=float))
        b = np.asarray(self.b_eq, dtype=float).ravel()
        if a.size == 0:
            a = a.reshape(0, c.size)
        lb = (
            np.zeros_like(c)
            if self.lb is None
            else np.asarray(self.lb, dtype=float).ravel()
        )
        if a.shape != (b.size, c.size):
            raise ValueError(f"a_eq shape {a.shape} inconsistent with c/b sizes")
        if lb.shape != c.shape or not np.all(np.isfinite(lb)):
            raise ValueError("lb must be finite and match c")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a_eq", a)
        object.__setattr__(self, "b_eq", b)
        object.__setattr__(self, "lb", lb)

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.b_eq.size


@dataclass(frozen=True)
class QpProblem:
    """min 0.5 z'Hz + f'z  s.t.  a_eq z = b_eq, a_ineq z >= b_ineq."""

    h: np.ndarray
    f: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.h, dtype=float))
        f = np.asarray(self.f, dtype=float).ravel()
        n = f.size
        if h.shape != (n, n):
            raise ValueError("H must be square and match f")
        scale = max(1.0, float(np.max(np.abs(h))))
        if np.max(np.abs(h - h.T)) > 1e-10 * scale:
            raise ValueError("H must be symmetric")
        if scipy.linalg.eigvalsh(h)[0] < -1e-9 * scale:
            raise ValueError("H must be positive semidefinite")
        object.__setattr__(self, "h", 0.5 * (h + h.T))
        object.__setattr__(self, "f", f)
        for name in ("a_eq", "a_ineq"):
            mat = getattr(self, name)
            vec = getattr(self, name.replace("a_", "b_"))
            if mat is None:
                continue
            mat = np.atleast_2d(np.asarray(mat, dtype=float))
            vec = np.asarray(vec, dtype=float).ravel()
            if mat.shape != (vec.size, n):
                raise ValueError(f"{name} shape inconsistent")
            object.__setattr__(self, name, mat)
            object.__setattr__(self, name.replace("a_", "b_"), vec)

    @property
    def n_vars(self) -> int:
        return self.f.size


def dump_problem(problem, path) -> None:
    """Plain-text matrix dump for offline debugging."""
    with open(path, "w") as fh:
        fh.write(f"# {type(problem).__name__}\n")
        for name in ("c", "h", "f", "a_eq", "b_eq", "a_ineq", "b_ineq", "lb"):
            value = getattr(problem, name, None)
            if value is None:
                continue
            arr = np.atleast_2d(np.asarray(value, dtype=float))
            fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# interior-point LP
# ---------------------------------------------------------------------------


def _chol_solve_sym(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with escalating diagonal jitter on breakdown."""
    scale = max(float(np.max(np.abs(mat))), 1e-300)
    jitter = 0.0
    for _ in range(12):
        try:
            fac = scipy.linalg.cho_factor(
                mat + jitter * np.eye(mat.shape[0]), lower=True, check_finite=False
            )
            return scipy.linalg.cho_solve(fac, rhs, check_finite=False)
        except scipy.linalg.LinAlgError:
            jitter = max(jitter * 100.0, 1e-14 * scale)
    raise OptimError("normal-equations factorization failed")


def _ip_core(a: np.ndarray, b: np.ndarray, c: np.ndarray, tol: float, max_iter: int):
    """Mehrotra predictor-corrector on min c'x s.t. ax=b, x>=0.

    Returns (x, y, z, converged, iterations, metrics) where metrics holds the
    final relative primal/dual residuals and gap.
    """
    m, n = a.shape
    norm_b = 1.0 + float(np.max(np.abs(b), initial=0.0))
    norm_c = 1.0 + float(np.max(np.abs(c), initial=0.0))

    aat = a @ a.T
    with np.errstate(all="ignore"):  # a degenerate start falls back to ones
        x = a.T @ _chol_solve_sym(aat, b)
        y = _chol_solve_sym(aat, a @ c)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        x = np.ones(n)
        y = np.zeros(m)
    z = c - a.T @ y
    dx = max(-1.5 * float(x.min(initial=0.0)), 0.0)
    dz = max(-1.5 * float(z.min(initial=0.0)), 0.0)
    x = x + dx
    z = z + dz
    xz = float(x @ z)
    sx = max(float(x.sum()), 1e-12)
    sz = max(float(z.sum()), 1e-12)
    x = x + (0.5 * xz / sz if xz > 0 else 1.0)
    z = z + (0.5 * xz / sx if xz > 0 else 1.0)
    x = np.maximum(x, 1e-10)
    z = np.maximum(z, 1e-10)

    theta = 0.99995
    best = (np.inf, x.copy(), y.copy(), z.copy(), 0)
    metrics = {"rel_p": np.inf, "rel_d": np.inf, "rel_g": np.inf}
    it = 0
    for it in range(1, max_iter + 1):
        rp = b - a @ x
        rd = c - a.T @ y - z
        mu = float(x @ z) / n
        pobj = float(c @ x)
        dobj = float(b @ y)
        rel_p = float(np.max(np.abs(rp), initial=0.0)) / norm_b
        rel_d = float(np.max(np.abs(rd), initial=0.0)) / norm_c
        rel_g = abs(pobj - dobj) / (1.0 + abs(pobj))
        metrics = {"rel_p": rel_p, "rel_d": rel_d, "rel_g": rel_g}
        score = max(rel_p, rel_d, rel_g)
        if score < best[0]:
            best = (score, x.copy(), y.copy(), z.copy(), it)
        if rel_p <= tol and rel_d <= tol and rel_g <= tol:
            return x, y, z, True, it, metrics
        if not np.isfinite(score) or mu > 1e40 or float(np.max(x)) > 1e18:
            break

        d = np.clip(x / z, 1e-16, 1e16)
        mmat = (a * d) @ a.T
        # affine-scaling predictor
        rc = -x * z
        rhs = rp - a @ ((rc - x * rd) / np.where(z == 0, 1e-300, z))
        dy = _chol_solve_sym(mmat, rhs)
        if not np.all(np.isfinite(dy)):
            break
        dz_ = rd - a.T @ dy
        dx_ = (rc - x * dz_) / np.where(z == 0, 1e-300, z)

        def _alpha(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        ap = _alpha(x, dx_)
        ad = _alpha(z, dz_)
        mu_aff = float((x + ap * dx_) @ (z + ad * dz_)) / n
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rc = sigma * mu - x * z - dx_ * dz_
        rhs = rp - a @ ((rc - x * rd) / np.where(z == 0, 1e-300, z))
        dy = _chol_solve_sym(mmat, rhs)
        dz_ = rd - a.T @ dy
        dx_ = (rc - x * dz_) / np.where(z == 0, 1e-300, z)
        ap = theta * _alpha(x, dx_)
        ad = theta * _alpha(z, dz_)
        x = x + ap * dx_
        y = y + ad * dy
        z = z + ad * dz_
        x = np.maximum(x, 1e-300)
        z = np.maximum(z, 1e-300)

    _, x, y, z, it_best = best
    return x, y, z, False, it, metrics


def _purify_to_vertex(a, b, c, x, tol):
    """Move an optimal interior point to a vertex of the optimal face.

    Standard crossover: while the positive support of x admits a null-space
    direction of the corresponding columns, walk along the direction that
    does not increase the objective until a coordinate hits zero.  Returns a
    basic optimal solution (deterministic tie handling, no randomization).
    """
    m, n = a.shape
    x = x.copy()
    scale = 1.0 + float(np.max(np.abs(x)))
    for _ in range(n):
        support = np.where(x > tol * scale)[0]
        if support.size <= m:
            # full column rank on the support means x is already basic
            if support.size == 0 or np.linalg.matrix_rank(a[:, support], tol=1e-10) == support.size:
                break
        sub = a[:, support]
        _, s, vt = np.linalg.svd(sub, full_matrices=True)
        rank = int(np.sum(s > max(s[0], 1.0) * 1e-11)) if s.size else 0
        if rank == support.size:
            break
        d_sub = vt[-1]
        d = np.zeros(n)
        d[support] = d_sub
        if float(c @ d) > 0:
            d = -d
        neg = d < -1e-14
        if not np.any(neg):
            # the ray keeps x nonnegative and does not increase the
            # objective; walking it adds nothing, flip to the other side
            d = -d
            neg = d < -1e-14
            if not np.any(neg):
                break
        step = float(np.min(-x[neg] / d[neg]))
        x = np.maximum(x + step * d, 0.0)
    return x


def solve_lp(problem: LpProblem, tol: float = 1e-8, max_iter: int = 200):
    """Solve an LP; returns (z, SolveStatus).

    Optimal solutions are crossed over to a vertex of the optimal face, so
    degenerate problems still yield basic solutions.  ``Infeasible`` always
    carries a Farkas certificate y (a_eq' y <= 0, b_eq' y > 0 after the lb
    shift); ``Unbounded`` carries a primal ray.
    """
    a, b, c, lb = problem.a_eq, problem.b_eq, problem.c, problem.lb
    shift = float(c @ lb)
    b_sh = b - a @ lb
    m, n = a.shape

    if m == 0:
        if np.all(c >= -tol):
            z = lb.copy()
            return z, SolveStatus(
                SolveState.OPTIMAL, float(c @ z), 0.0, 0.0, 0
            )
        ray = np.zeros(n)
        ray[int(np.argmin(c))] = 1.0
        return lb.copy(), SolveStatus(
            SolveState.UNBOUNDED, -np.inf, 0.0, np.inf, 0, certificate=ray
        )

    x, y, z, ok, iters, metrics = _ip_core(a, b_sh, c, tol, max_iter)
    if ok:
        obj_ip = float(c @ x)
        x_vertex = _purify_to_vertex(a, b_sh, c, x, tol)
        feas = float(np.max(np.abs(a @ x_vertex - b_sh), initial=0.0))
        # accept the vertex only if it kept feasibility and the objective
        if (
            feas <= 10 * tol * (1.0 + float(np.max(np.abs(b_sh), initial=0.0)))
            and float(c @ x_vertex) <= obj_ip + 10 * tol * (1.0 + abs(obj_ip))
        ):
            x = x_vertex
        sol = x + lb
        return sol, SolveStatus(
            SolveState.OPTIMAL,
            float(c @ sol),
            float(np.max(np.abs(a @ sol - b), initial=0.0)),
            metrics["rel_g"],
            iters,
        )

    # Diagnose: phase-1 feasibility problem  min 1's  s.t.  ax + sign(b)s = b.
    sgn = np.where(b_sh >= 0, 1.0, -1.0)
    a1 = np.hstack([a, np.diag(sgn)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    x1, y1, z1, ok1, it1, _ = _ip_core(a1, b_sh, c1, tol, max_iter)
    infeas_mass = float(c1 @ x1)
    if ok1 and infeas_mass > tol * (1.0 + float(np.max(np.abs(b_sh), initial=0.0))):
        # y1 is a Farkas ray: a'y <= tol componentwise while b'y ~ infeas_mass > 0
        return x + lb, SolveStatus(
            SolveState.INFEASIBLE,
            float("nan"),
            infeas_mass,
            np.inf,
            iters + it1,
            certificate=y1,
            message="equality system admits no nonnegative solution",
        )

    # Feasible: check for an improving ray  min c'd  s.t. ad = 0, 0 <= d <= 1.
    a2 = np.block([[a, np.zeros((m, n))], [np.eye(n), np.eye(n)]])
    b2 = np.concatenate([np.zeros(m), np.ones(n)])
    c2 = np.concatenate([c, np.zeros(n)])
    x2, _, _, ok2, it2, _ = _ip_core(a2, b2, c2, tol, max_iter)
    if ok2 and float(c2 @ x2) < -tol * (1.0 + float(np.max(np.abs(c), initial=0.0))):
        return x + lb, SolveStatus(
            SolveState.UNBOUNDED,
            -np.inf,
            metrics["rel_p"],
            np.inf,
            iters + it2,
            certificate=x2[:n],
            message="objective decreases along a feasible ray",
        )

    sol = x + lb
    return sol, SolveStatus(
        SolveState.MAX_ITER,
        float(c @ sol),
        float(np.max(np.abs(a @ sol - b), initial=0.0)),
        metrics["rel_g"],
        iters,
        message="interior point did not converge; best iterate returned",
    )


# ---------------------------------------------------------------------------
# ADMM QP with polish
# ---------------------------------------------------------------------------


def _qp_kkt_residuals(h, f, cmat, lo, up, x, yv):
    cx = cmat @ x if cmat.size else np.zeros(0)
    below = np.maximum(lo - cx, 0.0, where=np.isfinite(lo), out=np.zeros_like(cx))
    above = np.maximum(cx - up, 0.0, where=np.isfinite(up), out=np.zeros_like(cx))
    r_prim = float(max(below.max(initial=0.0), above.max(initial=0.0)))
    r_dual = float(np.max(np.abs(h @ x + f + (cmat.T @ yv if cmat.size else 0.0)), initial=0.0))
    comp = 0.0
    for i in range(cx.size):
        if yv[i] > 0:
            comp = max(comp, yv[i] * abs(up[i] - cx[i]) if np.isfinite(up[i]) else yv[i])
        elif yv[i] < 0:
            comp = max(comp, -yv[i] * abs(cx[i] - lo[i]) if np.isfinite(lo[i]) else -yv[i])
    return r_prim, r_dual, comp


def _qp_polish(h, f, cmat, lo, up, x, yv, tol):
    """Solve the equality-constrained KKT system on the active set."""
    n = x.size
    cx = cmat @ x
    act = np.zeros(cx.size, dtype=bool)
    for i in range(cx.size):
        if lo[i] == up[i]:
            act[i] = True
        elif np.isfinite(lo[i]) and (cx[i] - lo[i] < 1e3 * tol or yv[i] < -1e3 * tol):
            act[i] = True
        elif np.isfinite(up[i]) and (up[i] - cx[i] < 1e3 * tol or yv[i] > 1e3 * tol):
            act[i] = True
    ca = cmat[act]
    ba = np.where(
        np.isfinite(lo[act]) & (np.abs(cx[act] - lo[act]) <= np.abs(cx[act] - up[act])),
        lo[act],
        up[act],
    )
    ba = np.where(lo[act] == up[act], lo[act], ba)
    k = ca.shape[0]
    delta = 1e-9 * max(1.0, float(np.max(np.abs(h))))
    kkt = np.block([[h + delta * np.eye(n), ca.T], [ca, -delta * np.eye(k)]])
    rhs = np.concatenate([-f, ba])
    try:
        lu = scipy.linalg.lu_factor(kkt, check_finite=False)
    except scipy.linalg.LinAlgError:
        return None
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    for _ in range(3):  # iterative refinement against the unregularized system
        res = rhs - np.concatenate(
            [h @ sol[:n] + ca.T @ sol[n:], ca @ sol[:n]]
        )
        sol = sol + scipy.linalg.lu_solve(lu, res, check_finite=False)
    x_new = sol[:n]
    y_new = np.zeros(cx.size)
    y_new[act] = sol[n:]
    return x_new, y_new


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int = 50000):
    """ADMM (OSQP-style splitting) with active-set polish; returns (z, status)."""
    h, f = problem.h, problem.f
    n = f.size
    blocks, los, ups = [], [], []
    if problem.a_eq is not None and problem.a_eq.size:
        blocks.append(problem.a_eq)
        los.append(problem.b_eq)
        ups.append(problem.b_eq)
    if problem.a_ineq is not None and problem.a_ineq.size:
        blocks.append(problem.a_ineq)
        los.append(problem.b_ineq)
        ups.append(np.full(problem.b_ineq.size, np.inf))
    if not blocks:
        x, *_ = np.linalg.lstsq(h, -f, rcond=None)
        grad = h @ x + f
        if np.max(np.abs(grad), initial=0.0) > tol * (1.0 + np.max(np.abs(f), initial=0.0)):
            return x, SolveStatus(
                SolveState.UNBOUNDED, -np.inf, 0.0, np.inf, 0, certificate=-grad
            )
        obj = 0.5 * float(x @ h @ x) + float(f @ x)
        return x, SolveStatus(SolveState.OPTIMAL, obj, 0.0, 0.0, 0)

    cmat = np.vstack(blocks)
    lo = np.concatenate(los)
    up = np.concatenate(ups)
    m = cmat.shape[0]
    eq_mask = lo == up

    sigma = 1e-6
    rho_bar = 0.1
    alpha = 1.6

    def _rho_vec(rho):
        r = np.full(m, rho)
        r[eq_mask] *= 1e3
        return np.clip(r, 1e-6, 1e6)

    rho = _rho_vec(rho_bar)

    def _factor(rho):
        kkt = np.block(
            [[h + sigma * np.eye(n), cmat.T], [cmat, -np.diag(1.0 / rho)]]
        )
        return scipy.linalg.lu_factor(kkt, check_finite=False)

    lu = _factor(rho)
    x = np.zeros(n)
    zv = np.clip(cmat @ x, np.where(np.isfinite(lo), lo, -np.inf), up)
    yv = np.zeros(m)
    x_prev = x.copy()
    y_prev = yv.copy()

    status_state = SolveState.MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([sigma * x - f, zv - yv / rho])
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        x_t = sol[:n]
        z_t = zv + (sol[n:] - yv) / rho
        x = alpha * x_t + (1 - alpha) * x
        z_relax = alpha * z_t + (1 - alpha) * zv
        zv = np.clip(z_relax + yv / rho, lo, up)
        yv = yv + rho * (z_relax - zv)

        if it % 25 == 0 or it == max_iter:
            r_prim, r_dual, comp = _qp_kkt_residuals(h, f, cmat, lo, up, x, yv)
            if max(r_prim, r_dual, comp) <= 100 * tol or it % 1000 == 0:
                polished = _qp_polish(h, f, cmat, lo, up, x, yv, tol)
                if polished is not None:
                    rp2, rd2, c2 = _qp_kkt_residuals(h, f, cmat, lo, up, *polished)
                    if max(rp2, rd2, c2) <= max(r_prim, r_dual, comp):
                        if max(rp2, rd2, c2) <= tol:
                            x, yv = polished
                            status_state = SolveState.OPTIMAL
                            break
            if max(r_prim, r_dual, comp) <= tol:
                status_state = SolveState.OPTIMAL
                break
            # infeasibility certificates (OSQP section on termination)
            dy = yv - y_prev
            dx = x - x_prev
            ndy = float(np.max(np.abs(dy), initial=0.0))
            ndx = float(np.max(np.abs(dx), initial=0.0))
            if ndy > 1e-14:
                fin_up = np.isfinite(up)
                fin_lo = np.isfinite(lo)
                support = float(
                    np.sum(up[fin_up] * np.maximum(dy[fin_up], 0))
                    + np.sum(lo[fin_lo] * np.minimum(dy[fin_lo], 0))
                )
                bad_up = np.any(~fin_up & (dy > 1e-10 * ndy))
                if (
                    float(np.max(np.abs(cmat.T @ dy), initial=0.0)) <= 1e-10 * ndy
                    and support < -1e-10 * ndy
                    and not bad_up
                ):
                    return x, SolveStatus(
                        SolveState.INFEASIBLE,
                        float("nan"),
                        np.inf,
                        np.inf,
                        it,
                        certificate=dy,
                    )
            if ndx > 1e-14:
                cd = cmat @ dx
                ok_dir = np.all(np.abs(cd[eq_mask]) <= 1e-10 * ndx) and np.all(
                    cd[~eq_mask] >= -1e-10 * ndx
                )
                if (
                    float(np.max(np.abs(h @ dx), initial=0.0)) <= 1e-10 * ndx
                    and float(f @ dx) < -1e-10 * ndx
                    and ok_dir
                ):
                    return x, SolveStatus(
                        SolveState.UNBOUNDED,
                        -np.inf,
                        0.0,
                        np.inf,
                        it,
                        certificate=dx,
                    )
            x_prev = x.copy()
            y_prev = yv.copy()
        if it % 200 == 0:
            r_prim, r_dual, comp = _qp_kkt_residuals(h, f, cmat, lo, up, x, yv)
            ratio = (r_prim + 1e-30) / (r_dual + comp + 1e-30)
            if ratio > 10 or ratio < 0.1:
                rho_bar = float(np.clip(rho_bar * np.sqrt(ratio), 1e-6, 1e6))
                rho = _rho_vec(rho_bar)
                lu = _factor(rho)

    r_prim, r_dual, comp = _qp_kkt_residuals(h, f, cmat, lo, up, x, yv)
    obj = 0.5 * float(x @ h @ x) + float(f @ x)
    return x, SolveStatus(
        status_state, obj, r_prim, max(r_dual, comp), it
    )


# ---------------------------------------------------------------------------
# structured Markov-constrained least squares
# ---------------------------------------------------------------------------


def project_rows_to_simplex(mat: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row onto {v >= 0, sum v = 1}."""
    m = np.atleast_2d(mat)
    k = m.shape[1]
    s = -np.sort(-m, axis=1)
    css = np.cumsum(s, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = s - css / idx > 0
    r = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(m.shape[0]), r] / (r + 1)
    return np.maximum(m - tau[:, None], 0.0)


@dataclass
class MarkovLstsqResult:
    k_mat: np.ndarray
    residual: float
    min_entry: float
    transform_min_entry: float
    row_sum_deviation: float
    iterations: int
    converged: bool
    rho: float


def markov_constrained_lstsq(
    g_mat: np.ndarray,
    a_mat: np.ndarray,
    overlap: np.ndarray,
    tol_feas: float = 1e-8,
    tol_opt: float = 1e-7,
    max_iter: int = 20000,
    warm_start: np.ndarray | None = None,
) -> MarkovLstsqResult:
    """ADMM in matrix form for the Markov-constrained least-squares fit.

    The consensus variable is the symmetrized similarity N = S^1/2 K S^-1/2,
    which balances the conditioning of the two constraint maps (each sees
    cond(S) instead of cond(S)^2).  The N update diagonalizes in the
    eigenbasis of the overlap matrix through one generalized symmetric
    eigenproblem per penalty value, so every iteration costs a handful of
    K x K matrix products.  The returned matrix is the exactly nonnegative
    consensus copy; feasibility of its similarity transform is reported, not
    enforced, and is cleaned downstream by the caller's projection step.
    """
    K = g_mat.shape[0]
    d_lam, q = scipy.linalg.eigh(overlap)
    if d_lam[0] <= 0:
        raise OptimError("overlap matrix must be positive definite")
    d_sq = np.sqrt(d_lam)
    s_inv = (q / d_lam) @ q.T
    # normalize the objective scale so penalty parameters are dimensionless
    g_scale = float(scipy.linalg.svdvals(g_mat)[0])
    if g_scale <= 0:
        raise OptimError("G must be nonzero")
    g_n = g_mat / g_scale
    a_n = a_mat / g_scale
    h_rot = q.T @ (g_n.T @ g_n) @ q
    h0 = h_rot / np.outer(d_sq, d_sq)
    gta_rot = (q.T @ (g_n.T @ a_n) @ q) / d_sq[:, None] * d_sq[None, :]

    def rot(m):
        return q.T @ m @ q

    def unrot(m):
        return q @ m @ q.T

    def from_n(n_rot):
        """(K copy, transform copy) of the symmetrized iterate."""
        b1 = unrot(n_rot / d_sq[:, None] * d_sq[None, :])
        b2 = unrot(n_rot * d_sq[:, None] / d_sq[None, :])
        return b1, b2

    rho1 = 1.0
    rho2 = 1.0

    def setup(rho1):
        w, wv = scipy.linalg.eigh(h0 + rho1 * np.diag(1.0 / d_lam), np.diag(d_lam))
        return wv, w

    wv, w_eig = setup(rho1)
    denom = w_eig[:, None] + rho2 / (d_lam**2)[None, :]

    if warm_start is None:
        k0 = np.maximum(np.linalg.lstsq(g_n, a_n, rcond=None)[0], 0.0)
    else:
        k0 = np.asarray(warm_start, dtype=float)
    n_rot = rot(k0) * d_sq[:, None] / d_sq[None, :]
    b1, b2 = from_n(n_rot)
    z1 = np.maximum(b1, 0.0)
    z2 = project_rows_to_simplex(b2)
    u1 = np.zeros_like(z1)
    u2 = np.zeros_like(z2)
    alpha = 1.7

    converged = False
    it = 0
    updates = 0
    for it in range(1, max_iter + 1):
        c_rot = (
            gta_rot
            + rho1 * (rot(z1 - u1) / d_sq[:, None] * d_sq[None, :])
            + rho2 * (rot(z2 - u2) * d_sq[:, None] / d_sq[None, :])
        )
        n_rot = wv @ ((wv.T @ (c_rot / d_lam[None, :])) / denom)
        b1, b2 = from_n(n_rot)
        x1_hat = alpha * b1 + (1 - alpha) * z1
        x2_hat = alpha * b2 + (1 - alpha) * z2
        z1_old, z2_old = z1, z2
        z1 = np.maximum(x1_hat + u1, 0.0)
        z2 = project_rows_to_simplex(x2_hat + u2)
        u1 = u1 + x1_hat - z1
        u2 = u2 + x2_hat - z2

        if it % 50 == 0 or it == max_iter:
            rp1 = float(np.max(np.abs(b1 - z1)))
            rp2 = float(np.max(np.abs(b2 - z2)))
            d1 = rho1 * (rot(z1 - z1_old) / d_sq[:, None] * d_sq[None, :])
            d2 = rho2 * (rot(z2 - z2_old) * d_sq[:, None] / d_sq[None, :])
            r_dual = float(np.max(np.abs(d1 + d2)))
            if max(rp1, rp2) <= tol_feas and r_dual <= 10 * tol_opt:
                converged = True
                break
            if updates < 100:
                # rebalancing rho2 only rescales the cached denominators
                if rp2 > 3 * rp1:
                    rho2 *= 2.0
                    u2 *= 0.5
                    denom = w_eig[:, None] + rho2 / (d_lam**2)[None, :]
                    updates += 1
                elif rp1 > 3 * rp2 and rho2 > 1e-6:
                    rho2 *= 0.5
                    u2 *= 2.0
                    denom = w_eig[:, None] + rho2 / (d_lam**2)[None, :]
                    updates += 1
                ratio = (max(rp1, rp2) + 1e-30) / (r_dual + 1e-30)
                if ratio > 10 or ratio < 0.1:
                    f = float(np.clip(np.sqrt(ratio), 0.3, 3.0))
                    rho1 *= f
                    rho2 *= f
                    u1 /= f
                    u2 /= f
                    wv, w_eig = setup(rho1)
                    denom = w_eig[:, None] + rho2 / (d_lam**2)[None, :]
                    updates += 1

    k_out = z1
    m_out = overlap @ k_out @ s_inv
    return MarkovLstsqResult(
        k_mat=k_out,
        residual=float(np.linalg.norm(g_mat @ k_out - a_mat, "fro")),
        min_entry=float(k_out.min()),
        transform_min_entry=float(m_out.min()),
        row_sum_deviation=float(np.max(np.abs(m_out.sum(axis=1) - 1.0))),
        iterations=it,
        converged=converged,
        rho=rho1,
    )


def markov_lstsq_as_qp(g_mat, a_mat, overlap) -> QpProblem:
    """Flattened K^2-variable QP carrier of the same problem (small K only)."""
    K = g_mat.shape[0]
    s_inv = np.linalg.inv(overlap)
    eye_k = np.eye(K)
    h = np.kron(eye_k, g_mat.T @ g_mat)
    f = -(g_mat.T @ a_mat).flatten(order="F")
    transform_op = np.kron(s_inv, overlap)  # vec(S K S^-1), column-major vec
    a_ineq = np.vstack([np.eye(K * K), transform_op])
    b_ineq = np.zeros(2 * K * K)
    a_eq = np.kron((s_inv @ np.ones(K))[None, :], overlap)
    b_eq = np.ones(K)
    return QpProblem(h=h, f=f, a_eq=a_eq, b_eq=b_eq, a_ineq=a_ineq, b_ineq=b_ineq)
