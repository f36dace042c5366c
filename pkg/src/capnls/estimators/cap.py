"""Monotone convex adaptive partitioning (CAP) baseline.

Same split proposals as CAP-NLS, but each region gets its own
nonnegative-slope least-squares plane, the fitted function is the lower
envelope of those planes, and observations are reassigned to the plane that
is active for them before refitting.
"""

from __future__ import annotations

import time

import numpy as np

from ..core import Dataset, Partition, PiecewiseLinearModel
from ..qp import augment
from .base import EstimationError, UnitScaler, nonneg_slope_lstsq, region_statistics
from .capnls import CapNlsParams, ModelCollection, propose_partitions, select_parsimonious

MAX_REFIT_PASSES = 10


def _fit_regions(xt: np.ndarray, y: np.ndarray, assignment: np.ndarray, K: int) -> np.ndarray:
    G, b = region_statistics(xt, y, assignment, K)
    return nonneg_slope_lstsq(G, b)


def _envelope_mse(xt: np.ndarray, y: np.ndarray, coef: np.ndarray) -> tuple[float, np.ndarray]:
    vals = xt @ coef.T
    active = vals.argmin(axis=1)
    env = vals[np.arange(xt.shape[0]), active]
    return float(np.mean((env - y) ** 2)), active


def refit(
    xt: np.ndarray, y: np.ndarray, assignment: np.ndarray, K: int, min_size: int
) -> tuple[np.ndarray, np.ndarray, float]:
    """Fit per region, then alternate reassignment and refitting.

    A pass is kept only if it lowers the envelope MSE and leaves every region
    with at least ``min_size`` observations. Returns ``(coef, assignment, mse)``
    where ``assignment`` maps each observation to its envelope-active plane.
    """
    coef = _fit_regions(xt, y, assignment, K)
    mse, active = _envelope_mse(xt, y, coef)
    for _ in range(MAX_REFIT_PASSES):
        if np.array_equal(active, assignment):
            break
        counts = np.bincount(active, minlength=K)
        if np.any(counts < min_size):
            break
        new_coef = _fit_regions(xt, y, active, K)
        new_mse, new_active = _envelope_mse(xt, y, new_coef)
        if new_mse >= mse:
            break
        assignment, coef, mse, active = active, new_coef, new_mse, new_active
    return coef, active, mse


def fit_cap(data: Dataset, params: CapNlsParams | None = None) -> PiecewiseLinearModel:
    params = (params or CapNlsParams()).resolved(data.d)
    if data.n < params.n0:
        raise EstimationError(f"need at least n0={params.n0} observations, got {data.n}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(params.rng_seed)
    scaler = UnitScaler.for_data(data)
    sdata = scaler.scale(data)
    xt = augment(sdata.inputs)
    y = sdata.outputs
    min_size = params.min_child

    def to_model(coef: np.ndarray, active: np.ndarray) -> PiecewiseLinearModel:
        b0, b = scaler.unscale_planes(coef[:, 0], coef[:, 1:])
        fitted = b0[active] + np.einsum("ij,ij->i", data.inputs, b[active])
        mse = float(np.mean((fitted - data.outputs) ** 2))
        return PiecewiseLinearModel(
            b0, b, assignment=active, learning_mse=mse, info={"n_hyperplanes": coef.shape[0]}
        )

    partition = Partition.single(data.n)
    coef, active, _ = refit(xt, y, partition.assignment, 1, min_size)
    collection = ModelCollection()
    collection.add(to_model(coef, active))
    stalls = 0
    while params.max_hyperplanes is None or partition.K < params.max_hyperplanes:
        proposals = propose_partitions(partition, sdata, params, rng)
        best = None
        for prop in proposals:
            c, act, mse = refit(xt, y, prop.partition.assignment, prop.partition.K, min_size)
            if np.bincount(act, minlength=prop.partition.K).min() == 0:
                # a plane that is nowhere active adds nothing to the envelope
                continue
            if best is None or mse < best[0]:
                best = (mse, c, act)
        if best is None:
            break
        _, coef, active = best
        partition = Partition(active, coef.shape[0])
        prev = collection.entries[-1].learning_mse
        model = to_model(coef, active)
        collection.add(model)
        if params.fast_stop:
            gain = (prev - model.learning_mse) / prev if prev > 0 else 0.0
            stalls = stalls + 1 if gain < params.fast_threshold else 0
            if stalls >= 2:
                break
    chosen = select_parsimonious(collection, params.selection_tolerance)
    chosen.info.update(runtime_seconds=time.perf_counter() - t0, max_K=collection.entries[-1].K)
    chosen.info["collection_mses"] = collection.mses.tolist()
    return chosen
