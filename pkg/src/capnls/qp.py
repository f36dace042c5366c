"""Block-structured quadratic programs for concave least squares.

For a partition of the observations into K regions the least-squares fit
with one hyperplane per region, subject to the Afriat inequalities and
nonnegative slopes, is the convex QP

    min  1/2 b'Hb + g'b   s.t.  A b <= 0,  b >= l

over the stacked coefficients ``b = (b_1, ..., b_K)``, ``b_k = (b0_k, slopes_k)``.
``H`` is block diagonal, ``g`` is blockwise, and row ``(i, k)`` of ``A`` says
that the plane assigned to observation ``i`` is not above plane ``k`` at
``X_i``.

Two solution methods are provided. ``"active-set"`` is a constraint-generation
loop around a dense dual active-set method (Goldfarb-Idnani, via
``quadprog``): only Afriat rows that are violated at some iterate are handed
to the inner solver, which keeps each inner problem small even though ``A``
has ``nK`` rows. It needs ``H + ridge*I`` positive definite and returns the
ridge-regularised (minimum-norm) optimum. ``"interior-point"`` hands the
whole sparse problem to Clarabel and returns a point in the relative
interior of the optimal face. The two agree on fitted values; they differ on
the non-unique slopes at kinks when ``H`` is singular (CNLS), which changes
how the fitted planes extrapolate.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import clarabel
import quadprog
import scipy.sparse as sp
from scipy.optimize import nnls

from .core import Dataset, Partition

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


class QPSolverError(RuntimeError):
    """The inner solver failed on a problem that is always feasible."""


@dataclass(frozen=True)
class SolverConfig:
    kkt_tolerance: float = 1e-6
    max_iterations: int = 500
    ridge: float = 1e-8
    method: str = "active-set"

    def __post_init__(self) -> None:
        if self.method not in ("active-set", "interior-point"):
            raise ValueError(f"unknown QP method {self.method!r}")
        if not self.kkt_tolerance > 0:
            raise ValueError("kkt_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass(frozen=True, eq=False)
class QPProblem:
    """Standard-form QP for one partition.

    Only the ``n(K-1)`` nonzero Afriat rows are stored in ``A``; the logical
    row count ``nK`` is :attr:`n_rows`.
    """

    H: np.ndarray
    g: np.ndarray
    l: np.ndarray
    xt: np.ndarray
    y: np.ndarray
    assignment: np.ndarray
    K: int

    @property
    def n(self) -> int:
        return self.xt.shape[0]

    @property
    def d(self) -> int:
        return self.xt.shape[1] - 1

    @property
    def n_vars(self) -> int:
        return self.K * (self.d + 1)

    @property
    def n_rows(self) -> int:
        return self.n * self.K

    @cached_property
    def afriat_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """``(i, k)`` index arrays of the stored (nonzero) Afriat rows, row-major."""
        ii, kk = np.divmod(np.arange(self.n * self.K), self.K)
        keep = kk != self.assignment[ii]
        return ii[keep], kk[keep]

    @cached_property
    def A(self) -> sp.csr_matrix:
        ii, kk = self.afriat_pairs
        return afriat_rows(self.xt, self.assignment, ii, kk, self.K)

    def objective(self, beta: np.ndarray) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(0.5 * beta @ self.H @ beta + self.g @ beta)

    def constant(self) -> float:
        """The dropped term ``1/2 sum(Y^2)``; objective + constant = SSE / 2."""
        return float(0.5 * self.y @ self.y)

    def afriat_slack(self, beta: np.ndarray) -> np.ndarray:
        """``n x K`` matrix of ``plane_k(X_i) - plane_[i](X_i)`` (nonnegative when feasible)."""
        coef = np.asarray(beta, dtype=float).reshape(self.K, self.d + 1)
        vals = self.xt @ coef.T
        own = vals[np.arange(self.n), self.assignment]
        return vals - own[:, None]

    def dump(self) -> str:
        """Plain-text listing of n, d, K, dense H, g, A triplets and l."""
        buf = io.StringIO()
        buf.write(f"n {self.n}\nd {self.d}\nK {self.K}\nrows {self.n_rows}\n")
        buf.write("H\n")
        np.savetxt(buf, self.H, fmt="%.17g")
        buf.write("g\n")
        np.savetxt(buf, self.g[None, :], fmt="%.17g")
        coo = self.A.tocoo()
        ii, kk = self.afriat_pairs
        logical = ii[coo.row] * self.K + kk[coo.row]
        buf.write(f"A {coo.nnz}\n")
        for r, c, v in zip(logical, coo.col, coo.data):
            buf.write(f"{r} {c} {v:.17g}\n")
        buf.write("l\n")
        buf.write(" ".join("-inf" if np.isneginf(v) else f"{v:g}" for v in self.l) + "\n")
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class QPSolution:
    beta: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    working_set: np.ndarray | None = field(default=None, repr=False)

    def coefficients(self, d: int) -> np.ndarray:
        return self.beta.reshape(-1, d + 1)


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.complementarity)


def augment(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones(x.shape[0]), x])


def afriat_rows(
    xt: np.ndarray, assignment: np.ndarray, ii: np.ndarray, kk: np.ndarray, K: int
) -> sp.csr_matrix:
    """Sparse rows ``X~_i' b_[i] - X~_i' b_k`` for the given ``(i, k)`` pairs."""
    p = xt.shape[1]
    m = ii.size
    rows = np.repeat(np.arange(m), 2 * p)
    own_cols = assignment[ii][:, None] * p + np.arange(p)
    other_cols = kk[:, None] * p + np.arange(p)
    cols = np.concatenate([own_cols, other_cols], axis=1).ravel()
    vals = np.concatenate([xt[ii], -xt[ii]], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, K * p))


def _lower_bounds(K: int, d: int) -> np.ndarray:
    l = np.zeros((K, d + 1))
    l[:, 0] = -np.inf
    return l.ravel()


def assemble_qp(data: Dataset, partition: Partition) -> QPProblem:
    """Build ``H``, ``g`` and ``l`` by summing per-observation blocks."""
    a = partition.assignment
    if a.size != data.n:
        raise ValueError(f"partition covers {a.size} observations, dataset has {data.n}")
    K = partition.K
    if np.any(np.bincount(a, minlength=K) == 0):
        raise ValueError("empty region in partition")
    xt = augment(data.inputs)
    p = xt.shape[1]
    blocks = np.zeros((K, p, p))
    np.add.at(blocks, a, xt[:, :, None] * xt[:, None, :])
    gb = np.zeros((K, p))
    np.add.at(gb, a, -xt * data.outputs[:, None])
    H = np.zeros((K * p, K * p))
    for k in range(K):
        H[k * p:(k + 1) * p, k * p:(k + 1) * p] = blocks[k]
    return QPProblem(H, gb.ravel(), _lower_bounds(K, data.d), xt, data.outputs, a, K)


def assemble_cnls_qp(data: Dataset) -> QPProblem:
    """One hyperplane per observation: the fully flexible special case."""
    if data.n < 2:
        raise ValueError("CNLS needs at least two observations")
    return assemble_qp(data, Partition.identity(data.n))


def _inner_constraints(problem: QPProblem, ii: np.ndarray, kk: np.ndarray) -> np.ndarray:
    """Columns of ``C`` for quadprog (``C' b >= 0``): slope bounds then Afriat rows."""
    K, p = problem.K, problem.d + 1
    nv = K * p
    slope_idx = np.flatnonzero(np.isfinite(problem.l))
    m = slope_idx.size + ii.size
    C = np.zeros((nv, m))
    C[slope_idx, np.arange(slope_idx.size)] = 1.0
    if ii.size:
        cols = slope_idx.size + np.arange(ii.size)
        xi = problem.xt[ii]
        own = problem.assignment[ii]
        for j in range(p):
            # b_k - b_[i] >= 0 at X_i; own == k never occurs for stored pairs
            C[kk * p + j, cols] += xi[:, j]
            C[own * p + j, cols] -= xi[:, j]
    return C


def solve(
    problem: QPProblem,
    config: SolverConfig | None = None,
    warm_start: np.ndarray | None = None,
) -> QPSolution:
    """Solve ``problem`` to the configured KKT tolerance.

    ``warm_start`` is an optional boolean ``n x K`` mask of Afriat rows to
    include from the first inner solve (typically the parent partition's
    working set); it only affects speed, never the answer.
    """
    cfg = config or SolverConfig()
    if cfg.method == "interior-point":
        return _solve_interior(problem, cfg)
    K, p, n = problem.K, problem.d + 1, problem.n
    G = problem.H + cfg.ridge * np.eye(K * p)
    a = -problem.g
    working = np.zeros((n, K), dtype=bool)
    if warm_start is not None:
        working |= warm_start
    working[np.arange(n), problem.assignment] = False
    scale = 1.0 + float(np.max(np.abs(problem.y))) if n else 1.0
    add_tol = 1e-12 * scale
    status = MAX_ITER
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        ii, kk = np.nonzero(working)
        C = _inner_constraints(problem, ii, kk)
        b = np.zeros(C.shape[1])
        try:
            beta, _, _, _, lagr, _ = quadprog.solve_qp(G, a, C, b, 0)
        except ValueError as exc:
            raise QPSolverError(str(exc)) from exc
        slack = problem.afriat_slack(beta)
        new = (slack < -add_tol) & ~working
        if not new.any():
            status = OPTIMAL
            break
        working |= new
    report = _report_from_multipliers(problem, beta, C, lagr)
    kkt = max(report.stationarity / scale, report.primal_feasibility, report.complementarity / scale)
    if status == OPTIMAL and kkt > cfg.kkt_tolerance:
        status = MAX_ITER
    # hand on only the rows that bind at the optimum; rows that were violated
    # on the way but are slack now would just slow down later solves
    n_bounds = C.shape[1] - ii.size
    binding = np.zeros((n, K), dtype=bool)
    on = lagr[n_bounds:] > 0
    binding[ii[on], kk[on]] = True
    binding |= working & (slack <= add_tol)
    return QPSolution(
        beta=beta,
        objective=problem.objective(beta),
        kkt_residual=kkt,
        status=status,
        iterations=it,
        working_set=binding,
    )


def _solve_interior(problem: QPProblem, cfg: SolverConfig) -> QPSolution:
    nv = problem.n_vars
    bound_idx = np.flatnonzero(np.isfinite(problem.l))
    bounds = sp.csr_matrix(
        (-np.ones(bound_idx.size), (np.arange(bound_idx.size), bound_idx)), shape=(bound_idx.size, nv)
    )
    A_all = sp.vstack([problem.A, bounds]).tocsc()
    P = sp.triu(sp.csc_matrix(problem.H + cfg.ridge * np.eye(nv))).tocsc()
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max(cfg.max_iterations, 50)
    settings.tol_gap_abs = settings.tol_gap_rel = min(1e-8, cfg.kkt_tolerance)
    settings.tol_feas = min(1e-8, cfg.kkt_tolerance)
    m = A_all.shape[0]
    solver = clarabel.DefaultSolver(
        P, problem.g, A_all, np.zeros(m), [clarabel.NonnegativeConeT(m)], settings
    )
    res = solver.solve()
    beta = np.array(res.x, dtype=float)
    z = np.array(res.z, dtype=float)
    if cfg.ridge == 0.0 and str(res.status) in ("Solved", "AlmostSolved"):
        beta, z = _polish(problem, beta, z, A_all)
    scale = 1.0 + float(np.max(np.abs(problem.y)))
    grad = problem.H @ beta + problem.g
    stat = float(np.max(np.abs(grad + A_all.T @ z))) / scale
    primal = float(max(0.0, -problem.afriat_slack(beta).min(), -beta[bound_idx].min(initial=0.0)))
    comp = float(np.max(np.abs(z * (A_all @ beta)), initial=0.0)) / scale
    kkt = max(stat, primal, comp)
    ok = str(res.status) in ("Solved", "AlmostSolved") and kkt <= cfg.kkt_tolerance
    if str(res.status) in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        raise QPSolverError("interior-point solver reported an infeasible Afriat system")
    return QPSolution(beta, problem.objective(beta), kkt, OPTIMAL if ok else MAX_ITER, int(res.iterations))


def _polish(
    problem: QPProblem, beta: np.ndarray, z: np.ndarray, A_all: sp.csc_matrix
) -> tuple[np.ndarray, np.ndarray]:
    """Refine an interior-point solution on its active face.

    Rows that look active (multiplier above slack, or slack that is tiny
    relative to the data scale) are set to equality by a minimum-norm
    projection, and the fit is then corrected by the minimum-norm
    least-squares step inside their null space. Minimum-norm steps move the
    coefficients as little as possible, so planes that are distinct stay
    distinct. The result is kept only if it is feasible and does not raise
    the objective, and its multipliers are then refitted by nonnegative least
    squares on the active rows. Otherwise ``(beta, z)`` is returned unchanged.
    """
    scale = 1.0 + float(np.max(np.abs(problem.y)))
    slack = -(A_all @ beta)
    active = (z > slack) | (slack <= 1e-4 * scale)
    p = problem.d + 1
    X = np.zeros((problem.n, problem.n_vars))
    for j in range(p):
        X[np.arange(problem.n), problem.assignment * p + j] = problem.xt[:, j]
    cand = beta.copy()
    N = np.eye(problem.n_vars)
    if active.any():
        E = A_all[active].toarray()
        # a full V is only needed when E has fewer rows than columns
        u, sv, vt = np.linalg.svd(E, full_matrices=E.shape[0] < E.shape[1])
        rank = int(np.sum(sv > 1e-10 * max(sv.max(initial=0.0), 1.0)))
        # minimum-norm move onto {E b = 0}
        coord = (u[:, :rank].T @ (E @ cand)) / sv[:rank]
        cand = cand - vt[:rank].T @ coord
        N = vt[rank:].T
    if N.shape[1]:
        step, *_ = np.linalg.lstsq(X @ N, problem.y - X @ cand, rcond=None)
        cand = cand + N @ step
    if np.max(A_all @ cand, initial=0.0) > 1e-12 * scale:
        return beta, z
    if problem.objective(cand) > problem.objective(beta):
        return beta, z
    grad = problem.H @ cand + problem.g
    z_new = np.zeros_like(z)
    if active.any():
        # grad + E' lam = 0 with lam >= 0
        z_new[active], _ = nnls(E.T, -grad, maxiter=50 * E.shape[0])
    return cand, z_new


def _report_from_multipliers(
    problem: QPProblem, beta: np.ndarray, C: np.ndarray, lagr: np.ndarray
) -> KKTReport:
    grad = problem.H @ beta + problem.g
    stat = float(np.max(np.abs(grad - C @ lagr))) if grad.size else 0.0
    slack_bounds = beta[np.isfinite(problem.l)]
    afr = problem.afriat_slack(beta)
    primal = float(max(0.0, -afr.min(), -slack_bounds.min(initial=0.0)))
    comp = float(np.max(np.abs(lagr * (C.T @ beta)), initial=0.0))
    return KKTReport(stat, primal, comp)


def kkt_residuals(problem: QPProblem, solution: QPSolution | np.ndarray, active_tol: float = 1e-7) -> KKTReport:
    """KKT residuals of a candidate point, with multipliers recovered by NNLS.

    Constraints whose slack is within ``active_tol`` (relative to the output
    scale) are treated as candidates for being active; their multipliers are
    the nonnegative least-squares fit of the objective gradient.
    """
    beta = solution.beta if isinstance(solution, QPSolution) else np.asarray(solution, dtype=float)
    scale = 1.0 + float(np.max(np.abs(problem.y)))
    grad = problem.H @ beta + problem.g
    afr = problem.afriat_slack(beta)
    bound_idx = np.flatnonzero(np.isfinite(problem.l))
    bslack = beta[bound_idx]
    primal = float(max(0.0, -afr.min(), -bslack.min(initial=0.0)))
    afr[np.arange(problem.n), problem.assignment] = np.inf
    ii, kk = np.nonzero(afr <= active_tol * scale)
    bnear = bound_idx[bslack <= active_tol * scale]
    # gradient must equal sum(mu_j * grad of constraint j), constraints written as c_j' b >= 0
    C = np.zeros((beta.size, bnear.size + ii.size))
    C[bnear, np.arange(bnear.size)] = 1.0
    if ii.size:
        C[:, bnear.size:] = _inner_constraints(problem, ii, kk)[:, bound_idx.size:]
    if C.shape[1]:
        mu, stat = nnls(C, grad, maxiter=50 * C.shape[1])
        slack_near = C.T @ beta
        comp = float(np.max(np.abs(mu * slack_near), initial=0.0))
    else:
        stat = float(np.linalg.norm(grad))
        comp = 0.0
    return KKTReport(float(stat), primal, comp)
