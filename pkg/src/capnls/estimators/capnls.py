"""CNLS and CAP-NLS: Afriat-constrained least squares over observation partitions."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import Dataset, Partition, PiecewiseLinearModel, count_distinct_planes
from ..qp import OPTIMAL, QPSolution, SolverConfig, assemble_cnls_qp, assemble_qp, solve
from .base import EstimationError, UnitScaler

CNLS_SOLVER = SolverConfig(method="interior-point", ridge=0.0)


@dataclass(frozen=True)
class CapNlsParams:
    """Tuning of the adaptive partitioning search.

    ``L`` defaults to ``d``. ``n0`` defaults to ``4(d+1)`` so that each child
    of a split keeps at least ``2(d+1)`` observations; any ``n0 >= 2(d+1)`` is
    accepted.
    ``max_hyperplanes`` optionally caps the growth of K (``None`` grows until
    no admissible split is left).
    """

    M: int = 10
    L: int | None = None
    n0: int | None = None
    selection_tolerance: float = 0.01
    rng_seed: int = 0
    fast_stop: bool = False
    fast_threshold: float = 1e-3
    max_hyperplanes: int | None = None

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError("M must be positive")
        if self.L is not None and self.L < 1:
            raise ValueError("L must be positive")
        if not 0 < self.selection_tolerance < 1:
            raise ValueError("selection_tolerance must lie in (0, 1)")
        if not self.fast_threshold > 0:
            raise ValueError("fast_threshold must be positive")

    def resolved(self, d: int) -> CapNlsParams:
        n0 = 4 * (d + 1) if self.n0 is None else self.n0
        if n0 < 2 * (d + 1):
            raise ValueError(f"n0={n0} is below the minimum 2(d+1)={2 * (d + 1)}")
        return replace(self, L=d if self.L is None else self.L, n0=n0)

    @property
    def min_child(self) -> int:
        return math.ceil(self.n0 / 2)


@dataclass(frozen=True)
class CollectionEntry:
    K: int
    model: PiecewiseLinearModel
    learning_mse: float


@dataclass
class ModelCollection:
    """Models saved as the partition grows, in increasing K."""

    entries: list[CollectionEntry] = field(default_factory=list)

    def add(self, model: PiecewiseLinearModel) -> None:
        if self.entries and model.K <= self.entries[-1].K:
            raise ValueError("K must increase along the collection")
        self.entries.append(CollectionEntry(model.K, model, float(model.learning_mse)))

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> CollectionEntry:
        return self.entries[i]

    @property
    def Ks(self) -> list[int]:
        return [e.K for e in self.entries]

    @property
    def mses(self) -> np.ndarray:
        return np.array([e.learning_mse for e in self.entries])


@dataclass(frozen=True)
class Proposal:
    """Split of ``region`` along ``coordinate`` at ``knot`` (``x_j <= knot`` stays)."""

    region: int
    coordinate: int
    knot: float
    partition: Partition


def select_parsimonious(collection: ModelCollection, tol: float) -> PiecewiseLinearModel:
    """Smallest-K model whose MSE is within ``(1 + tol)`` of the largest-K MSE."""
    if len(collection) == 0:
        raise ValueError("empty model collection")
    target = (1.0 + tol) * collection.entries[-1].learning_mse
    for entry in collection.entries:
        if entry.learning_mse <= target:
            return entry.model
    return collection.entries[-1].model


def propose_partitions(
    current: Partition, data: Dataset, params: CapNlsParams, rng: np.random.Generator
) -> list[Proposal]:
    """Admissible single-region splits of ``current``.

    For each region, up to ``M`` knots are drawn without replacement from its
    observations; each knot splits the region along ``L`` coordinate axes.
    Splits leaving fewer than ``ceil(n0/2)`` observations on either side are
    dropped, as are duplicates. Output is ordered by region, coordinate and
    knot value, which is also the tie-breaking order.
    """
    params = params.resolved(data.d)
    d = data.d
    a = current.assignment
    K = current.K
    min_child = params.min_child
    out: list[Proposal] = []
    for r in range(K):
        members = np.flatnonzero(a == r)
        if members.size < 2 * min_child:
            continue
        n_knots = min(params.M, members.size)
        knots = rng.choice(members, size=n_knots, replace=False)
        if params.L >= d:
            coords = np.arange(d)
        else:
            coords = np.sort(rng.choice(d, size=params.L, replace=False))
        xr = data.inputs[members]
        for j in coords:
            seen: set[int] = set()
            for v in np.unique(data.inputs[knots, j]):
                left = xr[:, j] <= v
                n_left = int(left.sum())
                if n_left < min_child or members.size - n_left < min_child or n_left in seen:
                    continue
                # along one axis, the left count identifies the split
                seen.add(n_left)
                new = a.copy()
                new[members[~left]] = K
                out.append(Proposal(r, int(j), float(v), Partition(new, K + 1)))
    return out


def _model_from_solution(
    sol: QPSolution, partition: Partition, data: Dataset, scaler: UnitScaler, **info
) -> PiecewiseLinearModel:
    coef = sol.coefficients(data.d)
    b0, b = scaler.unscale_planes(coef[:, 0], np.maximum(coef[:, 1:], 0.0))
    a = partition.assignment
    fitted = b0[a] + np.einsum("ij,ij->i", data.inputs, b[a])
    mse = float(np.mean((fitted - data.outputs) ** 2))
    info.setdefault("n_hyperplanes", partition.K)
    info["qp_status"] = sol.status
    info["kkt_residual"] = sol.kkt_residual
    return PiecewiseLinearModel(b0, b, assignment=a, learning_mse=mse, info=info)


def _solve_checked(problem, cfg: SolverConfig, warm_start=None) -> QPSolution:
    sol = solve(problem, cfg, warm_start=warm_start)
    if sol.status != OPTIMAL:
        raise EstimationError(f"QP not solved to tolerance (status {sol.status}, kkt {sol.kkt_residual:.2e})")
    return sol


def fit_partition(data: Dataset, partition: Partition, solver: SolverConfig | None = None) -> PiecewiseLinearModel:
    """Afriat-constrained least squares for a fixed partition."""
    scaler = UnitScaler.for_data(data)
    sdata = scaler.scale(data)
    sol = _solve_checked(assemble_qp(sdata, partition), solver or SolverConfig())
    return _model_from_solution(sol, partition, data, scaler)


def fit_cnls(data: Dataset, solver: SolverConfig | None = None) -> PiecewiseLinearModel:
    """One hyperplane per observation with all pairwise Afriat constraints.

    The default solver is interior-point, whose optimum sits in the relative
    interior of the optimal face, so observations at kinks keep their own
    supporting planes.
    """
    if data.n < 2:
        raise EstimationError("CNLS needs at least two observations")
    scaler = UnitScaler.for_data(data)
    sdata = scaler.scale(data)
    sol = _solve_checked(assemble_cnls_qp(sdata), solver or CNLS_SOLVER)
    part = Partition.identity(data.n)
    model = _model_from_solution(sol, part, data, scaler)
    model.info["n_hyperplanes"] = count_distinct_planes(model.intercepts, model.slopes)
    return model


def _grow_working_set(parent: np.ndarray | None, proposal: Proposal) -> np.ndarray | None:
    if parent is None:
        return None
    return np.column_stack([parent, parent[:, proposal.region]])


def fit_capnls(
    data: Dataset, params: CapNlsParams | None = None, solver: SolverConfig | None = None
) -> tuple[PiecewiseLinearModel, ModelCollection]:
    """Grow the partition greedily and return the parsimonious model.

    Starting from a single global plane, every admissible split of every
    region is scored by solving its QP; the split with the smallest learning
    MSE is kept and K grows by one. Growth stops when no admissible split
    remains (or, with ``fast_stop``, after two consecutive additions that
    improve the MSE by less than ``fast_threshold`` relative).
    """
    params = (params or CapNlsParams()).resolved(data.d)
    cfg = solver or SolverConfig()
    if data.n < params.n0:
        raise EstimationError(f"need at least n0={params.n0} observations, got {data.n}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(params.rng_seed)
    scaler = UnitScaler.for_data(data)
    sdata = scaler.scale(data)

    partition = Partition.single(data.n)
    sol = _solve_checked(assemble_qp(sdata, partition), cfg)
    model = _model_from_solution(sol, partition, data, scaler)
    collection = ModelCollection()
    collection.add(model)
    working = sol.working_set
    stalls = 0
    n_qp = 1
    while params.max_hyperplanes is None or partition.K < params.max_hyperplanes:
        proposals = propose_partitions(partition, sdata, params, rng)
        if not proposals:
            break
        best: tuple[float, Proposal, QPSolution] | None = None
        for prop in proposals:
            cand = _solve_checked(assemble_qp(sdata, prop.partition), cfg, _grow_working_set(working, prop))
            n_qp += 1
            # objective + 1/2 sum(y^2) is half the SSE in scaled units
            sse = 2.0 * cand.objective + sdata.outputs @ sdata.outputs
            if best is None or sse < best[0]:
                best = (sse, prop, cand)
        _, prop, sol = best
        partition = prop.partition
        working = sol.working_set
        prev_mse = model.learning_mse
        model = _model_from_solution(sol, partition, data, scaler)
        collection.add(model)
        if params.fast_stop:
            gain = (prev_mse - model.learning_mse) / prev_mse if prev_mse > 0 else 0.0
            stalls = stalls + 1 if gain < params.fast_threshold else 0
            if stalls >= 2:
                break
    chosen = select_parsimonious(collection, params.selection_tolerance)
    chosen.info.update(
        runtime_seconds=time.perf_counter() - t0,
        qp_solves=n_qp,
        max_K=collection.entries[-1].K,
    )
    return chosen, collection


def fit_capnls_fast(
    data: Dataset, params: CapNlsParams | None = None, solver: SolverConfig | None = None
) -> tuple[PiecewiseLinearModel, ModelCollection]:
    """CAP-NLS with the two-stall stopping rule on the learning error."""
    return fit_capnls(data, replace(params or CapNlsParams(), fast_stop=True), solver)
