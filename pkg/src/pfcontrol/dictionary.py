"""Gaussian radial-basis dictionary, Gram matrices, and basis-overlap matrix.

The dictionary is a set of K Gaussian bumps psi_j(x) = exp(-|x - c_j|^2 / (2 s^2))
with shared width s.  Centers come from seeded k-means on open-loop data (or a
uniform grid fallback).  The overlap matrix holds the pairwise integrals
int psi_i psi_j dx, closed-form over R^q or Monte-Carlo over a box.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg


class DictionaryError(Exception):
    pass


class TooFewPoints(DictionaryError):
    pass


class EmptyDataset(DictionaryError):
    pass


class DimensionMismatch(DictionaryError):
    pass


class OverlapMethod(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    MONTE_CARLO = "monte_carlo"


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, (n, m) for (n, q) x (m, q)."""
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("nmq,nmq->nm", d, d)


def kmeans(points, k: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """Seeded k-means++ / Lloyd iteration; deterministic given ``seed``.

    Empty clusters are reseeded to the point farthest from its assigned
    center.  Stops when the largest center movement drops below 1e-9.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise TooFewPoints(f"need at least {k} points, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ initialization
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    closest = _sq_dists(pts, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = pts[rng.integers(n)]
        else:
            r = rng.uniform(0.0, total)
            idx = int(np.searchsorted(np.cumsum(closest), r))
            centers[j] = pts[min(idx, n - 1)]
        closest = np.minimum(closest, _sq_dists(pts, centers[j : j + 1])[:, 0])

    for _ in range(max_iter):
        d2 = _sq_dists(pts, centers)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members) == 0:
                far = int(np.argmax(d2[np.arange(n), assign]))
                new_centers[j] = pts[far]
                assign[far] = j
            else:
                new_centers[j] = members.mean(axis=0)
        move = np.max(np.linalg.norm(new_centers - centers, axis=1))
        centers = new_centers
        if move < 1e-9:
            break
    return centers


def grid_centers(lower, upper, k: int) -> np.ndarray:
    """Uniform-grid fallback: ~k centers on a regular lattice inside the box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    q = lower.shape[0]
    per_axis = max(2, int(round(k ** (1.0 / q))))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class RbfDictionary:
    """Gaussian RBF dictionary: centers (K, q) and shared positive width."""

    centers: np.ndarray
    sigma: float
    dim: int

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", centers)
        if centers.shape[0] < 2:
            raise ValueError("dictionary needs at least 2 centers")
        if centers.shape[1] != self.dim:
            raise DimensionMismatch("centers do not match the declared dimension")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if np.min(_sq_dists(centers, centers) + np.eye(len(centers)) * 1e300) <= 0:
            raise ValueError("centers must be distinct")

    @property
    def size(self) -> int:
        return self.centers.shape[0]


def eval_dictionary(rbf: RbfDictionary, x) -> np.ndarray:
    """Psi(x) in (0, 1]^K for a single state vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (rbf.dim,):
        raise DimensionMismatch(f"state must have shape ({rbf.dim},)")
    d2 = np.sum((rbf.centers - x) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * rbf.sigma**2))


def eval_many(rbf: RbfDictionary, xs) -> np.ndarray:
    """Row-wise dictionary evaluation: (n, q) states -> (n, K) matrix."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != rbf.dim:
        raise DimensionMismatch(f"states must have shape (n, {rbf.dim})")
    return np.exp(-_sq_dists(xs, rbf.centers) / (2.0 * rbf.sigma**2))


def rbf_gradient(rbf: RbfDictionary, x) -> np.ndarray:
    """Analytic gradients d psi_j / dx as a (K, q) matrix."""
    x = np.asarray(x, dtype=float)
    psi = eval_dictionary(rbf, x)
    return -(x[None, :] - rbf.centers) / rbf.sigma**2 * psi[:, None]


@dataclass(frozen=True)
class GramSet:
    """Empirical one-step Gram matrices G (symmetric PSD) and A."""

    g_mat: np.ndarray
    a_mat: np.ndarray
    sample_count: int

    def __post_init__(self):
        if np.max(np.abs(self.g_mat - self.g_mat.T)) > 1e-12 * max(
            1.0, float(np.max(np.abs(self.g_mat)))
        ):
            raise ValueError("G must be symmetric")


def gram_matrices(rbf: RbfDictionary, dataset) -> GramSet:
    """G = (1/L) sum Psi(x)Psi(x)^T and A = (1/L) sum Psi(x)Psi(y)^T."""
    if dataset.count == 0:
        raise EmptyDataset("dataset has no pairs")
    px = eval_many(rbf, dataset.xs)  # (L, K)
    py = eval_many(rbf, dataset.ys)
    L = dataset.count
    g = px.T @ px / L
    a = px.T @ py / L
    g = 0.5 * (g + g.T)  # kill accumulation asymmetry at the 1e-17 level
    return GramSet(g_mat=g, a_mat=a, sample_count=L)


@dataclass(frozen=True)
class LambdaMatrix:
    """Basis-overlap matrix with diagonal regularization ``regularization``."""

    lam: np.ndarray
    regularization: float
    method: OverlapMethod

    def __post_init__(self):
        if np.max(np.abs(self.lam - self.lam.T)) > 1e-10 * float(np.max(np.abs(self.lam))):
            raise ValueError("overlap matrix must be symmetric")


def lambda_matrix(
    rbf: RbfDictionary,
    method: OverlapMethod = OverlapMethod.CLOSED_FORM,
    mc_samples: int = 100_000,
    seed: int = 0,
    domain: tuple | None = None,
    regularization_scale: float = 1e-10,
) -> LambdaMatrix:
    """Pairwise overlap integrals of the dictionary.

    Closed form integrates the Gaussian product over all of R^q:
    (s * sqrt(pi))^q * exp(-|c_i - c_j|^2 / (4 s^2)).  Monte Carlo averages
    psi_i psi_j over uniform samples in ``domain`` scaled by its volume.
    Both get eps = regularization_scale * trace / K added to the diagonal.
    """
    K = rbf.size
    if method == OverlapMethod.CLOSED_FORM:
        d2 = _sq_dists(rbf.centers, rbf.centers)
        lam = (rbf.sigma * np.sqrt(np.pi)) ** rbf.dim * np.exp(-d2 / (4.0 * rbf.sigma**2))
    elif method == OverlapMethod.MONTE_CARLO:
        if domain is None:
            raise ValueError("Monte-Carlo overlap needs an integration box")
        lower = np.asarray(domain[0], dtype=float)
        upper = np.asarray(domain[1], dtype=float)
        rng = np.random.default_rng(seed)
        volume = float(np.prod(upper - lower))
        lam = np.zeros((K, K))
        chunk = 200_000
        done = 0
        while done < mc_samples:
            m = min(chunk, mc_samples - done)
            pts = rng.uniform(lower, upper, size=(m, rbf.dim))
            psi = eval_many(rbf, pts)
            lam += psi.T @ psi
            done += m
        lam = lam / mc_samples * volume
        lam = 0.5 * (lam + lam.T)
    else:
        raise ValueError(f"unknown overlap method {method}")
    eps = regularization_scale * float(np.trace(lam)) / K
    lam = lam + eps * np.eye(K)
    return LambdaMatrix(lam=lam, regularization=eps, method=method)


def save_dictionary(rbf: RbfDictionary, lam: LambdaMatrix | None, path_csv, path_meta) -> None:
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"center{i}" for i in range(rbf.dim)])
        for c in rbf.centers:
            writer.writerow([repr(float(v)) for v in c])
    meta = {"sigma": rbf.sigma, "dim": rbf.dim, "k": rbf.size}
    if lam is not None:
        meta["regularization"] = lam.regularization
        meta["method"] = lam.method.value
    with open(path_meta, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dictionary(path_csv, path_meta) -> RbfDictionary:
    with open(path_meta) as fh:
        meta = json.load(fh)
    with open(path_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    centers = np.asarray([[float(v) for v in row] for row in rows[1:] if row])
    return RbfDictionary(centers=centers, sigma=float(meta["sigma"]), dim=int(meta["dim"]))


def overlap_condition(lam: LambdaMatrix) -> float:
    """2-norm condition number of the regularized overlap matrix."""
    w = scipy.linalg.eigvalsh(lam.lam)
    return float(w[-1] / max(w[0], np.finfo(float).tiny))
