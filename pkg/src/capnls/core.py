"""Domain types and evaluation of concave piecewise-linear production functions.

A fitted function is stored as K hyperplanes ``y = b0_k + b_k' x``. On the
learning inputs each observation is evaluated on the plane of the region it
was assigned to; anywhere else the function is the lower envelope
``min_k (b0_k + b_k' x)``, the concave extension consistent with the fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

DEFAULT_FEASIBILITY_TOL = 1e-6


class ShapeError(ValueError):
    """Raised when array shapes disagree with a model or dataset."""


@dataclass(frozen=True)
class Dataset:
    """``n`` observations of ``d`` strictly positive inputs and one output.

    ``true_frontier`` holds ``f(X_i)`` when the data were simulated.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    true_frontier: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.outputs, dtype=float).ravel()
        if x.ndim != 2:
            raise ShapeError("inputs must be an n x d matrix")
        n, d = x.shape
        if y.shape[0] != n:
            raise ShapeError(f"outputs has length {y.shape[0]}, expected {n}")
        if n < d + 1:
            raise ValueError(f"need n >= d + 1 observations, got n={n}, d={d}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("inputs and outputs must be finite")
        if np.any(x <= 0):
            raise ValueError("all inputs must be strictly positive")
        f = self.true_frontier
        if f is not None:
            f = np.asarray(f, dtype=float).ravel()
            if f.shape[0] != n:
                raise ShapeError("true_frontier must have one value per observation")
            if not np.all(np.isfinite(f)):
                raise ValueError("true_frontier must be finite")
            f.setflags(write=False)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "true_frontier", f)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index: Sequence[int] | np.ndarray) -> Dataset:
        idx = np.asarray(index)
        f = None if self.true_frontier is None else self.true_frontier[idx]
        return Dataset(self.inputs[idx], self.outputs[idx], f)

    def with_outputs(self, y: np.ndarray) -> Dataset:
        """Same inputs (and frontier) with a replacement output vector."""
        return Dataset(self.inputs, y, self.true_frontier)


@dataclass(frozen=True)
class Partition:
    """Assignment of observations to regions ``0..K-1`` (0-based)."""

    assignment: np.ndarray
    K: int
    min_region_size: int = 1

    def __post_init__(self) -> None:
        a = np.asarray(self.assignment, dtype=np.intp).ravel()
        if self.K < 1:
            raise ValueError("K must be positive")
        if a.size and (a.min() < 0 or a.max() >= self.K):
            raise ValueError("region index out of range")
        counts = np.bincount(a, minlength=self.K)
        if np.any(counts == 0):
            raise ValueError("every region must contain at least one observation")
        if np.any(counts < self.min_region_size):
            raise ValueError(
                f"region sizes {counts.tolist()} violate minimum {self.min_region_size}"
            )
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    @classmethod
    def single(cls, n: int) -> Partition:
        return cls(np.zeros(n, dtype=np.intp), 1)

    @classmethod
    def identity(cls, n: int) -> Partition:
        return cls(np.arange(n), n)


@dataclass(frozen=True)
class Hyperplane:
    intercept: float
    slopes: tuple[float, ...]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(x, dtype=float) @ np.asarray(self.slopes)


@dataclass(frozen=True)
class PiecewiseLinearModel:
    """K hyperplanes with an optional learning-set assignment.

    Coefficients are kept as arrays: ``intercepts`` has shape ``(K,)`` and
    ``slopes`` has shape ``(K, d)``.
    """

    intercepts: np.ndarray
    slopes: np.ndarray
    assignment: np.ndarray | None = None
    learning_mse: float = 0.0
    feasibility_tolerance: float = DEFAULT_FEASIBILITY_TOL
    info: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        b0 = np.atleast_1d(np.asarray(self.intercepts, dtype=float)).ravel()
        b = np.asarray(self.slopes, dtype=float)
        if b.ndim == 1:
            b = b[None, :] if b0.size == 1 else b[:, None]
        if b.shape[0] != b0.size:
            raise ShapeError("need one slope vector per intercept")
        b0.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "intercepts", b0)
        object.__setattr__(self, "slopes", b)
        if self.assignment is not None:
            a = np.asarray(self.assignment, dtype=np.intp).ravel()
            if a.size and (a.min() < 0 or a.max() >= b0.size):
                raise ValueError("assignment refers to a missing hyperplane")
            a.setflags(write=False)
            object.__setattr__(self, "assignment", a)

    @classmethod
    def from_hyperplanes(cls, planes: Sequence[Hyperplane], **kwargs: Any) -> PiecewiseLinearModel:
        b0 = np.array([p.intercept for p in planes], dtype=float)
        b = np.array([p.slopes for p in planes], dtype=float)
        return cls(b0, b, **kwargs)

    @property
    def K(self) -> int:
        return self.intercepts.size

    @property
    def d(self) -> int:
        return self.slopes.shape[1]

    @property
    def hyperplanes(self) -> list[Hyperplane]:
        return [
            Hyperplane(float(c), tuple(float(s) for s in row))
            for c, row in zip(self.intercepts, self.slopes)
        ]

    @property
    def partition(self) -> Partition | None:
        if self.assignment is None:
            return None
        return Partition(self.assignment, self.K)

    def plane_values(self, x: np.ndarray) -> np.ndarray:
        """Value of every plane at every row of ``x``: shape ``(m, K)``."""
        x = _as_rows(x, self.d)
        return self.intercepts[None, :] + x @ self.slopes.T

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self, x)

    def n_distinct(self, rtol: float = 1e-6) -> int:
        """Number of numerically distinct hyperplanes."""
        return count_distinct_planes(self.intercepts, self.slopes, rtol)

    def to_dict(self) -> dict[str, Any]:
        return {
            "K": self.K,
            "hyperplanes": [
                {"intercept": float(c), "slopes": [float(s) for s in row]}
                for c, row in zip(self.intercepts, self.slopes)
            ],
            "assignment": None if self.assignment is None else [int(i) for i in self.assignment],
            "learning_mse": float(self.learning_mse),
        }

    def to_json(self, **kwargs: Any) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> PiecewiseLinearModel:
        planes = doc["hyperplanes"]
        if len(planes) != doc["K"]:
            raise ValueError("K does not match the number of hyperplanes")
        return cls(
            np.array([p["intercept"] for p in planes], dtype=float),
            np.array([p["slopes"] for p in planes], dtype=float),
            assignment=doc.get("assignment"),
            learning_mse=float(doc.get("learning_mse", 0.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> PiecewiseLinearModel:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ModelDiagnostics:
    max_afriat_violation: float
    min_slope: float
    learning_mse: float
    stored_learning_mse: float
    envelope_gap: float
    tolerance: float

    @property
    def monotone(self) -> bool:
        return self.min_slope >= -self.tolerance

    @property
    def afriat_feasible(self) -> bool:
        return self.max_afriat_violation <= self.tolerance

    @property
    def ok(self) -> bool:
        return self.monotone and self.afriat_feasible


def _as_rows(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        # a bare vector is one point when d > 1 and a column of points when d == 1
        x = x[None, :] if d > 1 else x[:, None]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"expected points with {d} coordinates, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("prediction inputs must be finite")
    return x


def evaluate_in_sample(model: PiecewiseLinearModel, data: Dataset) -> np.ndarray:
    """Assigned-plane values ``b0[i] + b[i]' X_i`` on the learning inputs."""
    if model.assignment is None:
        raise ValueError("model carries no learning-set assignment")
    if model.assignment.size != data.n:
        raise ShapeError(
            f"assignment has {model.assignment.size} entries but dataset has {data.n}"
        )
    a = model.assignment
    return model.intercepts[a] + np.einsum("ij,ij->i", data.inputs, model.slopes[a])


def predict(model: PiecewiseLinearModel, x: np.ndarray) -> np.ndarray:
    """Lower envelope of the hyperplanes at each row of ``x``."""
    return model.plane_values(x).min(axis=1)


def afriat_violation(model: PiecewiseLinearModel, data: Dataset) -> float:
    """Largest amount by which an assigned plane exceeds some other plane."""
    own = evaluate_in_sample(model, data)
    env = model.plane_values(data.inputs).min(axis=1)
    return float(max(np.max(own - env), 0.0))


def validate_model(model: PiecewiseLinearModel, data: Dataset) -> ModelDiagnostics:
    tol = model.feasibility_tolerance
    env = predict(model, data.inputs)
    if model.assignment is not None and model.assignment.size == data.n:
        fitted = evaluate_in_sample(model, data)
        violation = float(max(np.max(fitted - env), 0.0))
        gap = float(np.max(np.abs(fitted - env)))
    else:
        fitted = env
        violation = 0.0
        gap = 0.0
    mse = float(np.mean((fitted - data.outputs) ** 2))
    return ModelDiagnostics(
        max_afriat_violation=violation,
        min_slope=float(model.slopes.min()),
        learning_mse=mse,
        stored_learning_mse=float(model.learning_mse),
        envelope_gap=gap,
        tolerance=tol,
    )


def count_distinct_planes(intercepts: np.ndarray, slopes: np.ndarray, rtol: float = 1e-6) -> int:
    """Greedy count of planes whose coefficients differ by more than ``rtol``."""
    coef = np.column_stack([intercepts, slopes])
    if coef.shape[0] == 0:
        return 0
    tol = rtol * max(1.0, float(np.max(np.abs(coef))))
    reps = coef[:1]
    for row in coef[1:]:
        if not np.any(np.max(np.abs(reps - row), axis=1) <= tol):
            reps = np.vstack([reps, row])
    return int(reps.shape[0])
