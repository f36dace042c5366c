"""Shared pieces: the estimator protocol, unit scaling and small NNLS fits."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Protocol, runtime_checkable

import numpy as np

from ..core import Dataset, PiecewiseLinearModel, evaluate_in_sample


class EstimationError(RuntimeError):
    """An estimator could not produce a model for the given data."""


@runtime_checkable
class FittedModel(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


class Estimator(Protocol):
    name: str

    def fit(self, data: Dataset) -> Any: ...


def in_sample(model: Any, data: Dataset) -> np.ndarray:
    """Fitted values on the learning inputs.

    Piecewise-linear models carrying an assignment use their assigned planes;
    everything else is evaluated through ``predict``.
    """
    if isinstance(model, PiecewiseLinearModel) and model.assignment is not None:
        if model.assignment.size == data.n:
            return evaluate_in_sample(model, data)
    return np.asarray(model.predict(data.inputs), dtype=float)


def n_hyperplanes(model: Any) -> float:
    if isinstance(model, PiecewiseLinearModel):
        return float(model.info.get("n_hyperplanes", model.K))
    return float("nan")


@dataclass(frozen=True)
class UnitScaler:
    """Positive per-column rescaling of inputs and of the output.

    Concavity, monotonicity and the Afriat system are invariant under
    ``x_j -> x_j / sx_j`` and ``y -> y / sy``; fitting in rescaled units keeps
    the QPs well conditioned for survey data recorded in thousands of pesos.
    """

    sx: np.ndarray
    sy: float

    @classmethod
    def for_data(cls, data: Dataset) -> UnitScaler:
        sx = np.max(np.abs(data.inputs), axis=0)
        sy = float(np.max(np.abs(data.outputs)))
        return cls(sx, sy if sy > 0 else 1.0)

    def scale(self, data: Dataset) -> Dataset:
        f = None if data.true_frontier is None else data.true_frontier / self.sy
        return Dataset(data.inputs / self.sx, data.outputs / self.sy, f)

    def unscale_planes(self, intercepts: np.ndarray, slopes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return intercepts * self.sy, slopes * self.sy / self.sx[None, :]


def nonneg_slope_lstsq(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimise ``1/2 t'Gt - b't`` with ``t[1:] >= 0`` for a stack of problems.

    ``G`` has shape ``(K, p, p)`` (Gram matrices of ``(1, x)``) and ``b`` shape
    ``(K, p)``. Exact: every pattern of slopes held at zero is solved and the
    best feasible pattern kept, which is cheap for the input dimensions of a
    production function (``2**d`` patterns).
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    K, p, _ = G.shape
    d = p - 1
    reg = 1e-12 * (np.trace(G, axis1=1, axis2=2) + 1.0)
    Gr = G + reg[:, None, None] * np.eye(p)
    best = np.zeros((K, p))
    best_val = np.full(K, np.inf)
    for free_mask in itertools.product((True, False), repeat=d):
        free = np.array((True,) + free_mask)
        idx = np.flatnonzero(free)
        sub = Gr[:, idx[:, None], idx[None, :]]
        t_sub = np.linalg.solve(sub, b[:, idx][:, :, None])[:, :, 0]
        t = np.zeros((K, p))
        t[:, idx] = t_sub
        feasible = np.all(t[:, 1:] >= -1e-12, axis=1)
        val = 0.5 * np.einsum("ki,kij,kj->k", t, G, t) - np.einsum("ki,ki->k", b, t)
        better = feasible & (val < best_val)
        best[better] = t[better]
        best_val[better] = val[better]
        if free_mask == (True,) * d and np.all(feasible):
            # unconstrained optimum is feasible everywhere: nothing can beat it
            break
    best[:, 1:] = np.maximum(best[:, 1:], 0.0)
    return best


def region_statistics(xt: np.ndarray, y: np.ndarray, assignment: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    p = xt.shape[1]
    G = np.zeros((K, p, p))
    np.add.at(G, assignment, xt[:, :, None] * xt[:, None, :])
    b = np.zeros((K, p))
    np.add.at(b, assignment, xt * y[:, None])
    return G, b
