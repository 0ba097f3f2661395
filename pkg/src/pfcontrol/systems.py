"""Controlled benchmark dynamical systems and snapshot-pair dataset generation.

A system is described by an immutable :class:`SystemSpec`.  Discrete maps are
advanced with :func:`step_map`; continuous flows are sampled with a fixed-step
RK4 integrator under zero-order-hold control (:func:`integrate_flow`).
:func:`generate_dataset` rolls seeded uniform initial conditions forward under
each quantized control value and collects consecutive state pairs.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np


class SystemsError(Exception):
    """Base class for errors raised by this module."""


class UnknownSystemKind(SystemsError):
    pass


class DimensionMismatch(SystemsError):
    pass


class NonFiniteState(SystemsError):
    pass


class EmptyDataset(SystemsError):
    pass


class MalformedRow(SystemsError):
    pass


class ActionMismatch(SystemsError):
    pass


class SystemKind(str, enum.Enum):
    CUBIC_LOGISTIC = "cubic_logistic"
    DUFFING = "duffing"
    DOUBLE_WELL = "double_well"
    STANDARD_MAP = "standard_map"
    EXTERNAL_DATA = "external_data"


class TimeKind(str, enum.Enum):
    DISCRETE_MAP = "discrete_map"
    CONTINUOUS_FLOW = "continuous_flow"


# Parameters each update rule reads; validated at construction time.
_REQUIRED_PARAMS = {
    SystemKind.CUBIC_LOGISTIC: ("lam",),
    SystemKind.DUFFING: ("damping",),
    SystemKind.DOUBLE_WELL: ("a",),
    SystemKind.STANDARD_MAP: ("K",),
    SystemKind.EXTERNAL_DATA: (),
}


@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of a controlled benchmark system.

    ``state_domain`` is the axis-aligned box the operator approximation lives
    on; images leaving it are dropped during dataset generation.  ``dt`` is the
    sampling period for continuous flows (ignored for maps).
    """

    kind: SystemKind
    params: dict
    state_dim: int
    domain_lower: tuple
    domain_upper: tuple
    time_kind: TimeKind
    dt: float = 0.0

    def __post_init__(self):
        lower = np.asarray(self.domain_lower, dtype=float)
        upper = np.asarray(self.domain_upper, dtype=float)
        if lower.shape != (self.state_dim,) or upper.shape != (self.state_dim,):
            raise DimensionMismatch(
                f"domain bounds must have shape ({self.state_dim},)"
            )
        if not np.all(lower < upper):
            raise ValueError("state_domain requires lower < upper per axis")
        if self.time_kind == TimeKind.CONTINUOUS_FLOW and not self.dt > 0:
            raise ValueError("dt must be positive for continuous flows")
        missing = [p for p in _REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise ValueError(f"params missing {missing} for kind {self.kind.value}")
        object.__setattr__(self, "domain_lower", tuple(float(v) for v in lower))
        object.__setattr__(self, "domain_upper", tuple(float(v) for v in upper))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.domain_lower, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.domain_upper, dtype=float)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Vectorized closed-box membership test over the last axis."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


@dataclass(frozen=True)
class ControlGrid:
    """Ordered finite set of control vectors u^1..u^M."""

    values: tuple  # tuple of tuples, each of length d
    d: int = 1

    def __post_init__(self):
        vals = [tuple(float(v) for v in np.atleast_1d(u)) for u in self.values]
        if not vals:
            raise ValueError("control grid must be nonempty")
        if any(len(u) != self.d for u in vals):
            raise DimensionMismatch("control values must all have dimension d")
        if sorted(vals) != vals or len(set(vals)) != len(vals):
            raise ValueError("control values must be strictly increasing and distinct")
        object.__setattr__(self, "values", tuple(vals))

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def index_nearest(self, u) -> int:
        """0-based index of the grid value closest to ``u`` (ties -> smaller)."""
        arr = self.as_array()
        dist = np.linalg.norm(arr - np.atleast_1d(np.asarray(u, float)), axis=1)
        return int(np.argmin(dist))

    @classmethod
    def from_range(cls, start: float, step: float, stop: float) -> "ControlGrid":
        """Inclusive scalar grid start:step:stop with exact endpoint snapping."""
        n = int(round((stop - start) / step))
        vals = np.round(start + step * np.arange(n + 1), 12)
        return cls(values=tuple((float(v),) for v in vals), d=1)


@dataclass
class TrajectoryDataset:
    """Snapshot pairs (x_m -> y_m) collected under one fixed control value.

    ``action_index`` is 1-based.  ``source_seed`` is generation metadata and is
    excluded from equality; pair arrays compare exactly.
    """

    action_index: int
    xs: np.ndarray  # (count, q)
    ys: np.ndarray  # (count, q)
    source_seed: int = -1
    n_dropped: int = 0

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=float))
        if self.xs.size == 0 or self.ys.size == 0:
            raise EmptyDataset(f"no pairs for action {self.action_index}")
        if self.xs.shape != self.ys.shape:
            raise DimensionMismatch("xs and ys must have matching shapes")

    @property
    def count(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (
            self.action_index == other.action_index
            and self.xs.shape == other.xs.shape
            and np.array_equal(self.xs, other.xs)
            and np.array_equal(self.ys, other.ys)
        )


def _as_control(u, expect_dim: int | None = None) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if expect_dim is not None and u.shape[-1] != expect_dim:
        raise DimensionMismatch(f"control has dimension {u.shape[-1]}, expected {expect_dim}")
    return u


def _check_state(spec: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.state_dim:
        raise DimensionMismatch(
            f"state has dimension {x.shape[-1]}, expected {spec.state_dim}"
        )
    return x


def step_map(spec: SystemSpec, x, u) -> np.ndarray:
    """One step of a discrete-map system; broadcasts over a leading batch axis."""
    if spec.time_kind != TimeKind.DISCRETE_MAP:
        raise ValueError("step_map requires a discrete-map system")
    x = _check_state(spec, x)
    u = _as_control(u)
    if spec.kind == SystemKind.CUBIC_LOGISTIC:
        lam = float(spec.params["lam"])
        return lam * x - x**3 + u[..., :1] if x.ndim > 1 else lam * x - x**3 + u[0]
    if spec.kind == SystemKind.STANDARD_MAP:
        kick = float(spec.params["K"])
        xs = x[..., 0]
        ys = x[..., 1]
        uu = u[..., 0] if u.ndim == x.ndim else u[0]
        push = kick * uu * np.sin(2.0 * np.pi * xs)
        x_new = np.mod(xs + ys + push, 1.0)
        # np.mod of a tiny negative rounds up to exactly 1.0; wrap it to 0
        x_new = np.where(x_new >= 1.0, 0.0, x_new)
        y_new = ys + push
        return np.stack([x_new, y_new], axis=-1)
    raise UnknownSystemKind(f"no discrete update rule for {spec.kind.value}")


def vector_field(spec: SystemSpec, x, u) -> np.ndarray:
    """Right-hand side of the controlled ODE for continuous-flow systems."""
    if spec.time_kind != TimeKind.CONTINUOUS_FLOW:
        raise ValueError("vector_field requires a continuous-flow system")
    x = _check_state(spec, x)
    u = _as_control(u)
    x1 = x[..., 0]
    x2 = x[..., 1]
    uu = u[..., 0] if u.ndim == x.ndim else u[0]
    if spec.kind == SystemKind.DUFFING:
        c = float(spec.params["damping"])
        return np.stack([x2, (x1 - x1**3) - c * x2 + uu], axis=-1)
    if spec.kind == SystemKind.DOUBLE_WELL:
        a = float(spec.params["a"])
        return np.stack([x2, -(x1**3) + a * x1**2 + x1 - a + uu], axis=-1)
    raise UnknownSystemKind(f"no vector field for {spec.kind.value}")


def _rk4(spec: SystemSpec, x: np.ndarray, u, dt: float, substeps: int) -> np.ndarray:
    h = dt / substeps
    for _ in range(substeps):
        k1 = vector_field(spec, x, u)
        k2 = vector_field(spec, x + 0.5 * h * k1, u)
        k3 = vector_field(spec, x + 0.5 * h * k2, u)
        k4 = vector_field(spec, x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def integrate_flow(spec: SystemSpec, x, u, dt: float, substeps: int = 10) -> np.ndarray:
    """Classical RK4 over ``substeps`` equal sub-intervals with u held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = _check_state(spec, x)
    y = _rk4(spec, x, u, dt, substeps)
    if not np.all(np.isfinite(y)):
        raise NonFiniteState("integration diverged to a non-finite state")
    return y


def advance(spec: SystemSpec, x, u, substeps: int = 10) -> np.ndarray:
    """One sampling step: map step for maps, dt-length RK4 slab for flows."""
    if spec.time_kind == TimeKind.DISCRETE_MAP:
        return step_map(spec, x, u)
    return integrate_flow(spec, x, u, spec.dt, substeps)


def generate_dataset(
    spec: SystemSpec,
    grid: ControlGrid,
    n_traj: int,
    traj_len: int,
    seed: int,
    substeps: int = 10,
) -> list[TrajectoryDataset]:
    """Per-action snapshot datasets from uniform seeded initial conditions.

    For each action ``a`` (1-based), ``n_traj`` initial conditions are drawn
    uniformly over the state domain from a stream derived from ``(seed, a)``
    and rolled forward ``traj_len`` steps under constant u^a.  A trajectory
    ends at the first image that leaves the domain (or goes non-finite); that
    pair is dropped and counted.  The result is a pure function of the inputs.
    """
    if n_traj < 1 or traj_len < 1:
        raise ValueError("n_traj and traj_len must be >= 1")
    datasets = []
    for a, u in enumerate(grid.values, start=1):
        rng = np.random.default_rng(np.random.SeedSequence((seed, a)))
        x = rng.uniform(spec.lower, spec.upper, size=(n_traj, spec.state_dim))
        xs_parts, ys_parts = [], []
        dropped = 0
        for _ in range(traj_len):
            if spec.time_kind == TimeKind.DISCRETE_MAP:
                y = step_map(spec, x, np.asarray([u] * len(x)))
            else:
                y = _rk4(spec, x, np.asarray([u] * len(x)), spec.dt, substeps)
            ok = np.all(np.isfinite(y), axis=-1) & spec.contains(
                np.where(np.isfinite(y), y, 0.0)
            )
            dropped += int(np.sum(~ok))
            xs_parts.append(x[ok])
            ys_parts.append(y[ok])
            x = y[ok]
            if len(x) == 0:
                break
        xs = np.concatenate(xs_parts) if xs_parts else np.empty((0, spec.state_dim))
        if xs.shape[0] == 0:
            raise EmptyDataset(f"all pairs escaped the domain for action {a}")
        datasets.append(
            TrajectoryDataset(
                action_index=a,
                xs=xs,
                ys=np.concatenate(ys_parts),
                source_seed=seed,
                n_dropped=dropped,
            )
        )
    return datasets


def _fmt(v: float) -> str:
    # repr of a Python float is the shortest decimal that round-trips exactly
    return repr(float(v))


def write_dataset(dataset: TrajectoryDataset, path) -> None:
    q = dataset.dim
    header = ["action", "dim"] + [f"x{i}" for i in range(q)] + [f"y{i}" for i in range(q)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for xm, ym in zip(dataset.xs, dataset.ys):
            writer.writerow(
                [dataset.action_index, q] + [_fmt(v) for v in xm] + [_fmt(v) for v in ym]
            )


def read_dataset(path) -> TrajectoryDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if len(rows) <= 1:
        raise EmptyDataset(f"{path} contains no data rows")
    action = None
    q = None
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            a = int(row[0])
            dim = int(row[1])
            vals = [float(v) for v in row[2:]]
        except (ValueError, IndexError) as exc:
            raise MalformedRow(f"{path}:{lineno}: {exc}") from exc
        if len(vals) != 2 * dim:
            raise MalformedRow(f"{path}:{lineno}: expected {2 * dim} floats, got {len(vals)}")
        if action is None:
            action, q = a, dim
        elif a != action or dim != q:
            raise ActionMismatch(f"{path}:{lineno}: mixed action/dim in one file")
        xs.append(vals[:dim])
        ys.append(vals[dim:])
    return TrajectoryDataset(action_index=action, xs=np.asarray(xs), ys=np.asarray(ys))
