"""Finite-population model selection.

A survey observes ``nL`` of ``n`` establishments. The error of a production
function over the whole population blends an in-sample part for the observed
units (learning error plus an optimism penalty) with a predictive part for the
unobserved ones, estimated by repeated learning-testing (RLT):

    Err_FS = (nT / n) * MSE_RLT + (nL / n) * (MSE_learn + optimism)

Optimism is Efron's covariance penalty, estimated with a parametric bootstrap
whose noise variance comes from the learning MSE of CNLS.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .core import Dataset
from .estimators import CNLS, EstimationError, in_sample, n_hyperplanes

log = logging.getLogger(__name__)

TIE_BAND = 0.02
MIN_RLT_SUCCESS = 0.9
MAX_BOOTSTRAP_FAILURE = 0.1


class SelectionError(RuntimeError):
    """Too many replicate fits failed to produce a trustworthy estimate."""


@dataclass(frozen=True)
class RLTConfig:
    """Learning fractions and replicate count for repeated learning-testing."""

    fractions: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5)
    V: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if any(not 0 < f < 1 for f in self.fractions):
            raise ValueError("RLT fractions must lie strictly between 0 and 1")
        if self.V < 2:
            raise ValueError("V must be at least 2")


@dataclass(frozen=True)
class BootstrapConfig:
    """Parametric bootstrap size ``B`` and variance multiplier ``c >= 1``."""

    B: int = 500
    variance_inflation: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.B < 2:
            raise ValueError("B must be at least 2")
        if self.variance_inflation < 1:
            raise ValueError("variance_inflation must be >= 1")


RLT_STREAM = 0
BOOTSTRAP_STREAM = 1


def replicate_rng(seed: int, replicate: int, stream: int = RLT_STREAM) -> np.random.Generator:
    """Independent generator for one replicate, derived from ``(seed, stream, replicate)``.

    Each replicate owns its stream, so results do not depend on the order in
    which replicates run.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(stream), int(replicate)])


def _map(fn: Callable[[int], Any], items: Sequence[int], workers: int) -> list[Any]:
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- RLT


@dataclass(frozen=True)
class ReplicateResult:
    """One learning/testing split: learning and testing MSE plus model size."""

    mse_learn: float
    mse_test: float
    n_hyperplanes: float


def _fit_split(data: Dataset, estimator: Any, learn: np.ndarray) -> ReplicateResult | None:
    mask = np.zeros(data.n, dtype=bool)
    mask[learn] = True
    ldata = data.subset(np.flatnonzero(mask))
    try:
        model = estimator.fit(ldata)
    except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("%s failed on a learning set: %s", getattr(estimator, "name", estimator), exc)
        return None
    fitted = in_sample(model, ldata)
    pred = np.asarray(model.predict(data.inputs[~mask]), dtype=float)
    return ReplicateResult(
        float(np.mean((fitted - ldata.outputs) ** 2)),
        float(np.mean((pred - data.outputs[~mask]) ** 2)),
        n_hyperplanes(model),
    )


def rlt_replicates(
    data: Dataset, estimator: Any, subsets: Sequence[np.ndarray], workers: int = 1
) -> list[ReplicateResult | None]:
    """Fit on each learning index set and test on its complement (``None`` marks a failure)."""
    subsets = [np.asarray(s, dtype=int) for s in subsets]
    for s in subsets:
        if s.size == 0 or s.size >= data.n:
            raise ValueError("each learning set must be a nonempty proper subset")
    return _map(lambda r: _fit_split(data, estimator, subsets[r]), range(len(subsets)), workers)


def draw_subsets(n: int, n_learn: int, V: int, seed: int) -> list[np.ndarray]:
    """``V`` uniform random learning index sets of size ``n_learn``."""
    return [np.sort(replicate_rng(seed, r).choice(n, size=n_learn, replace=False)) for r in range(V)]


def learning_size(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 1e-9))


def _successful(results: list[ReplicateResult | None], what: str) -> list[ReplicateResult]:
    ok = [r for r in results if r is not None]
    if len(ok) < MIN_RLT_SUCCESS * len(results):
        raise SelectionError(f"{what}: only {len(ok)} of {len(results)} replicates succeeded")
    return ok


def rlt_predictive_error(
    data: Dataset, estimator: Any, fraction: float, cfg: RLTConfig | None = None, workers: int = 1
) -> tuple[float, list[float]]:
    """Mean testing MSE over ``V`` random learning sets of size ``floor(fraction * n)``.

    Returns ``(mse_rlt, per_replicate)``; failed replicates are dropped from the
    mean and an error is raised if fewer than 90% succeed.
    """
    cfg = cfg or RLTConfig()
    n_learn = learning_size(data.n, fraction)
    if not 0 < n_learn < data.n:
        raise ValueError(f"fraction {fraction} gives learning size {n_learn} for n={data.n}")
    results = rlt_replicates(data, estimator, draw_subsets(data.n, n_learn, cfg.V, cfg.rng_seed), workers)
    ok = _successful(results, f"RLT at fraction {fraction}")
    per = [r.mse_test for r in ok]
    return float(np.mean(per)), per


# ---------------------------------------------------------------- optimism


@dataclass(frozen=True)
class OptimismEstimate:
    """Bootstrap covariance penalty and its ingredients.

    ``optimism = (2/n) * sum(cov)``; ``n_hyperplanes`` averages the model size
    over the bootstrap refits (NaN for parametric estimators).
    """

    optimism: float
    cov: np.ndarray
    sigma2: float
    B_used: int
    n_hyperplanes: float

    def __float__(self) -> float:
        return self.optimism


def bootstrap_optimism(
    data: Dataset,
    estimator: Any,
    sigma2_hat: float,
    cfg: BootstrapConfig | None = None,
    fitted: np.ndarray | None = None,
    workers: int = 1,
) -> OptimismEstimate:
    """Parametric-bootstrap estimate of in-sample optimism.

    Draws ``Y* ~ N(Yhat, c * sigma2_hat * I)`` ``B`` times, refits the estimator
    on each, and estimates ``cov_i = sum_b Yhat*_i (Y*_i - mean_b Y*_i) / (B - 1)``.
    ``fitted`` defaults to the estimator's in-sample values on ``data``.
    """
    cfg = cfg or BootstrapConfig()
    if sigma2_hat < 0:
        raise ValueError("sigma2_hat must be nonnegative")
    if fitted is None:
        fitted = in_sample(estimator.fit(data), data)
    fitted = np.asarray(fitted, dtype=float)
    if fitted.shape != (data.n,):
        raise ValueError("fitted must hold one value per observation")
    sd = math.sqrt(cfg.variance_inflation * sigma2_hat)
    if sd == 0.0:
        return OptimismEstimate(0.0, np.zeros(data.n), 0.0, cfg.B, float("nan"))

    def one(b: int) -> tuple[np.ndarray, np.ndarray, float] | None:
        y_star = fitted + sd * replicate_rng(cfg.rng_seed, b, BOOTSTRAP_STREAM).standard_normal(data.n)
        boot = data.with_outputs(y_star)
        try:
            model = estimator.fit(boot)
        except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("bootstrap refit %d failed: %s", b, exc)
            return None
        return y_star, in_sample(model, boot), n_hyperplanes(model)

    results = [r for r in _map(one, range(cfg.B), workers) if r is not None]
    if len(results) < 2 or len(results) < (1 - MAX_BOOTSTRAP_FAILURE) * cfg.B:
        raise SelectionError(f"bootstrap: only {len(results)} of {cfg.B} refits succeeded")
    y_star = np.array([r[0] for r in results])
    y_hat = np.array([r[1] for r in results])
    B = y_star.shape[0]
    cov = np.sum(y_hat * (y_star - y_star.mean(axis=0)), axis=0) / (B - 1)
    ks = [r[2] for r in results]
    k_avg = float(np.mean(ks)) if not all(math.isnan(k) for k in ks) else float("nan")
    return OptimismEstimate(2.0 * float(cov.sum()) / data.n, cov, float(sigma2_hat), B, k_avg)


def sigma2_from_cnls(data: Dataset) -> float:
    """Noise variance for the bootstrap: the learning MSE of CNLS.

    CNLS is the most flexible member of the family, so this is a deliberately
    low estimate (a "little" bootstrap).
    """
    if data.n < 2:
        raise ValueError("need at least two observations")
    return float(CNLS().fit(data).learning_mse)


# ---------------------------------------------------------------- blends


def full_set_error(mse_rlt: float, mse_learn: float, optimism: float, nL: int, n: int) -> float:
    """``(nT/n) * mse_rlt + (nL/n) * (mse_learn + optimism)`` with ``nT = n - nL``."""
    if not 0 < nL <= n:
        raise ValueError("need 0 < nL <= n")
    in_part = (nL / n) * (mse_learn + optimism)
    if nL == n:
        return in_part
    return ((n - nL) / n) * mse_rlt + in_part


def _clipped_r2(err: float, var_y: float) -> float:
    if not var_y > 0:
        raise ValueError("output variance must be positive")
    if math.isnan(err):
        return float("nan")
    return min(max(1.0 - err / var_y, 0.0), 1.0)


def r2_fs(err_fullset: float, var_y_fullset: float) -> float:
    """``max(1 - Err_FS / Var(Y_FS), 0)``."""
    return _clipped_r2(err_fullset, var_y_fullset)


def r2_pred(err_pred: float, var_y_fullset: float) -> float:
    """``max(1 - Err_pred / Var(Y_FS), 0)``: predictive error only."""
    return _clipped_r2(err_pred, var_y_fullset)


def output_variance(data: Dataset) -> float:
    """Full-set output variance (population form, divisor ``n``)."""
    return float(np.var(data.outputs))


# ---------------------------------------------------------------- estimates


@dataclass(frozen=True)
class ErrorEstimates:
    """All error terms for one estimator at one survey fraction.

    At fraction 1 (a census) there is no testing set: ``mse_rlt`` and
    ``r2_pred`` are NaN and ``err_fullset`` is the in-sample error.
    ``per_replicate`` holds the testing MSE of each RLT replicate and
    ``per_replicate_r2_fs`` the matching replicate-level R²_FS.
    """

    fraction: float
    n_learn: int
    n: int
    mse_learn: float
    mse_rlt: float
    optimism: float
    err_insample: float
    err_fullset: float
    r2_fs: float
    r2_pred: float
    k_avg: float
    per_replicate: tuple[float, ...] = ()
    per_replicate_r2_fs: tuple[float, ...] = ()


def estimate_errors(
    data: Dataset,
    estimator: Any,
    fraction: float,
    rlt: RLTConfig | None = None,
    boot: BootstrapConfig | None = None,
    optimism_sets: int = 1,
    workers: int = 1,
) -> ErrorEstimates:
    """Full-set error terms for one estimator at one fraction.

    For ``fraction < 1`` the learning and testing MSEs average over the RLT
    replicates, and the optimism is bootstrapped on the first
    ``optimism_sets`` learning sets (each with its own CNLS variance). For
    ``fraction == 1`` the learning MSE and optimism come from the full data.
    """
    rlt = rlt or RLTConfig()
    boot = boot or BootstrapConfig()
    var_y = output_variance(data)
    n = data.n
    if fraction >= 1.0:
        model = estimator.fit(data)
        fitted = in_sample(model, data)
        mse_learn = float(np.mean((fitted - data.outputs) ** 2))
        opt = bootstrap_optimism(data, estimator, sigma2_from_cnls(data), boot, fitted, workers)
        err = full_set_error(float("nan"), mse_learn, opt.optimism, n, n)
        k = opt.n_hyperplanes if not math.isnan(opt.n_hyperplanes) else n_hyperplanes(model)
        r2 = r2_fs(err, var_y)
        return ErrorEstimates(
            1.0, n, n, mse_learn, float("nan"), opt.optimism, mse_learn + opt.optimism,
            err, r2, float("nan"), k, (), (r2,),
        )
    nL = learning_size(n, fraction)
    if not 0 < nL < n:
        raise ValueError(f"fraction {fraction} gives learning size {nL} for n={n}")
    subsets = draw_subsets(n, nL, rlt.V, rlt.rng_seed)
    results = rlt_replicates(data, estimator, subsets, workers)
    ok = _successful(results, f"RLT at fraction {fraction}")
    mse_learn = float(np.mean([r.mse_learn for r in ok]))
    mse_rlt = float(np.mean([r.mse_test for r in ok]))
    optimisms = []
    for s, r in zip(subsets, results):
        if len(optimisms) >= optimism_sets:
            break
        if r is None:
            continue
        ldata = data.subset(s)
        optimisms.append(bootstrap_optimism(ldata, estimator, sigma2_from_cnls(ldata), boot, None, workers).optimism)
    optimism = float(np.mean(optimisms))
    err = full_set_error(mse_rlt, mse_learn, optimism, nL, n)
    per_r2 = tuple(r2_fs(full_set_error(r.mse_test, r.mse_learn, optimism, nL, n), var_y) for r in ok)
    ks = [r.n_hyperplanes for r in ok]
    return ErrorEstimates(
        fraction, nL, n, mse_learn, mse_rlt, optimism, mse_learn + optimism, err,
        r2_fs(err, var_y), r2_pred(mse_rlt, var_y),
        float("nan") if all(math.isnan(k) for k in ks) else float(np.mean(ks)),
        tuple(r.mse_test for r in ok), per_r2,
    )


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ComparisonRow:
    dataset: str
    fraction: float
    estimator: str
    r2_fs: float
    r2_pred: float
    k_avg: float
    best: bool
    ratio_to_best: float
    tie: bool
    err_fullset: float
    mse_learn: float
    mse_rlt: float
    optimism: float


REPORT_FIELDS = [f for f in ComparisonRow.__dataclass_fields__]


def best_set(r2: dict[str, float], band: float = TIE_BAND) -> tuple[str, ...]:
    """Estimators whose R²_FS is within ``band`` (absolute) of the best."""
    finite = {k: v for k, v in r2.items() if not math.isnan(v)}
    if not finite:
        return ()
    top = max(finite.values())
    return tuple(k for k, v in finite.items() if v >= top - band - 1e-12)


@dataclass
class MethodComparison:
    """R²_FS of every estimator at every fraction and the best set per fraction.

    ``ratio_to_best`` is an estimator's R²_FS divided by the best R²_FS at that
    fraction; ``tie`` marks members of the best set other than the top one.
    """

    dataset: str
    estimates: dict[tuple[str, float], ErrorEstimates]
    best: dict[float, tuple[str, ...]]
    failures: dict[str, str] = field(default_factory=dict)
    band: float = TIE_BAND

    @property
    def fractions(self) -> list[float]:
        return sorted({f for _, f in self.estimates})

    @property
    def estimators(self) -> list[str]:
        seen: list[str] = []
        for name, _ in self.estimates:
            if name not in seen:
                seen.append(name)
        return seen

    def r2_table(self) -> dict[float, dict[str, float]]:
        return {f: {e: self.estimates[(e, f)].r2_fs for e in self.estimators if (e, f) in self.estimates} for f in self.fractions}

    def k_avg(self, estimator: str) -> dict[float, float]:
        return {f: self.estimates[(estimator, f)].k_avg for f in self.fractions if (estimator, f) in self.estimates}

    def rows(self) -> list[ComparisonRow]:
        out = []
        for f in self.fractions:
            table = self.r2_table()[f]
            top = max((v for v in table.values() if not math.isnan(v)), default=float("nan"))
            bset = self.best.get(f, ())
            for e in self.estimators:
                if (e, f) not in self.estimates:
                    continue
                est = self.estimates[(e, f)]
                ratio = est.r2_fs / top if top and top > 0 else float("nan")
                out.append(
                    ComparisonRow(
                        self.dataset, f, e, est.r2_fs, est.r2_pred, est.k_avg,
                        e in bset, ratio, e in bset and est.r2_fs < top,
                        est.err_fullset, est.mse_learn, est.mse_rlt, est.optimism,
                    )
                )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: _fmt(v) for k, v in asdict(row).items()})
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "band": self.band,
            "rows": [{k: _json_num(v) for k, v in asdict(r).items()} for r in self.rows()],
            "best_set": {_fmt(f): list(v) for f, v in sorted(self.best.items())},
            "failures": dict(sorted(self.failures.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _json_num(v: Any) -> Any:
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def compare_methods(
    data: Dataset,
    estimators: Iterable[Any],
    rlt: RLTConfig | None = None,
    boot: BootstrapConfig | None = None,
    include_census: bool = True,
    dataset_name: str = "data",
    band: float = TIE_BAND,
    optimism_sets: int = 1,
    workers: int = 1,
) -> MethodComparison:
    """R²_FS for every estimator at each RLT fraction (and the census).

    An estimator whose estimation fails is recorded in ``failures`` and the
    comparison continues with the others.
    """
    rlt = rlt or RLTConfig()
    fractions = list(rlt.fractions) + ([1.0] if include_census else [])
    estimates: dict[tuple[str, float], ErrorEstimates] = {}
    failures: dict[str, str] = {}
    for est in estimators:
        name = getattr(est, "name", type(est).__name__)
        try:
            for f in fractions:
                estimates[(name, f)] = estimate_errors(data, est, f, rlt, boot, optimism_sets, workers)
        except (EstimationError, SelectionError, ValueError) as exc:
            failures[name] = str(exc)
            for f in fractions:
                estimates.pop((name, f), None)
    best: dict[float, tuple[str, ...]] = {}
    for f in fractions:
        best[f] = best_set({e: estimates[(e, g)].r2_fs for (e, g) in estimates if g == f}, band)
    return MethodComparison(dataset_name, estimates, best, failures, band)
