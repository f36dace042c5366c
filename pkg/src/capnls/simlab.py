"""Monte Carlo experiments on Cobb-Douglas data generating processes.

For each (learning size nL, full size nF) pair and each of V replicates, a
full set of nF observations is drawn, the first nL form the learning set, and
every estimator is fitted on it. Errors are measured against the true frontier
``f`` and against noisy outputs, in sample and on a fresh testing set, and
blended into full-set errors with weights ``nL/nF`` and ``(nF - nL)/nF``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Iterator, Sequence

import numpy as np

from .core import Dataset
from .estimators import EstimationError, in_sample, make_estimator, n_hyperplanes

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.1


@dataclass(frozen=True)
class DGPSpec:
    """``Y = prod_j x_j ** exponents_j + N(0, sigma^2)`` on ``U(low, high)^d``."""

    d: int
    exponents: tuple[float, ...]
    sigma: float
    input_low: float = 0.1
    input_high: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "exponents", tuple(float(a) for a in self.exponents))
        if len(self.exponents) != self.d:
            raise ValueError(f"need {self.d} exponents, got {len(self.exponents)}")
        if any(a < 0 for a in self.exponents):
            raise ValueError("exponents must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0 < self.input_low < self.input_high:
            raise ValueError("need 0 < input_low < input_high")

    @classmethod
    def bivariate(cls, sigma: float) -> DGPSpec:
        return cls(2, (0.4, 0.5), sigma)

    @classmethod
    def trivariate(cls, sigma: float) -> DGPSpec:
        return cls(3, (0.4, 0.3, 0.2), sigma)

    @classmethod
    def four_input(cls, sigma: float) -> DGPSpec:
        return cls(4, (0.3, 0.25, 0.25, 0.1), sigma)

    def frontier(self, x: np.ndarray) -> np.ndarray:
        return np.exp(np.log(np.asarray(x, dtype=float)) @ np.asarray(self.exponents))

    def frontier_moments(self) -> tuple[float, float]:
        """Exact mean and variance of ``f(X)`` under the uniform input law."""
        lo, hi = self.input_low, self.input_high

        def raw(p: float) -> float:
            return (hi ** (p + 1) - lo ** (p + 1)) / ((p + 1) * (hi - lo))

        m1 = math.prod(raw(a) for a in self.exponents)
        m2 = math.prod(raw(2 * a) for a in self.exponents)
        return m1, m2 - m1 * m1


def generate(spec: DGPSpec, n: int, rng: np.random.Generator) -> Dataset:
    """Draw ``n`` observations with their true frontier values."""
    if n < 1:
        raise ValueError("n must be positive")
    x = rng.uniform(spec.input_low, spec.input_high, size=(n, spec.d))
    f = spec.frontier(x)
    y = f + spec.sigma * rng.standard_normal(n) if spec.sigma > 0 else f.copy()
    return Dataset(x, y, f)


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid and replication settings.

    The (nL, nF) grid is every learning size paired with every full size it
    does not exceed; when ``learning_sizes`` is omitted, learning sizes are
    ``round(fraction * nF)`` for each of ``learning_fractions``.
    """

    dgp: DGPSpec
    full_sizes: tuple[int, ...] = (100, 200, 300)
    learning_sizes: tuple[int, ...] | None = None
    learning_fractions: tuple[float, ...] = (1.0, 0.8, 0.5, 0.3)
    V: int = 20
    W: int = 30
    nT_f: int = 1000
    estimators: tuple[str, ...] = ("capnls", "cap", "cnls")
    rng_seed: int = 0
    record_runtime: bool = False
    estimator_options: dict[str, dict[str, Any]] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "full_sizes", tuple(int(n) for n in self.full_sizes))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "learning_fractions", tuple(float(f) for f in self.learning_fractions))
        if self.learning_sizes is not None:
            object.__setattr__(self, "learning_sizes", tuple(int(n) for n in self.learning_sizes))
            if self.learning_sizes and min(self.learning_sizes) > max(self.full_sizes, default=0):
                raise ValueError("every learning size exceeds every full size")
        if any(not 0 < f <= 1 for f in self.learning_fractions):
            raise ValueError("learning fractions must lie in (0, 1]")
        if self.V < 1 or self.W < 1 or self.nT_f < 1:
            raise ValueError("V, W and nT_f must be positive")
        if any(n < self.dgp.d + 1 for n in self.full_sizes):
            raise ValueError("full sizes must be at least d + 1")
        for name in self.estimators:
            make_estimator(name, **self.estimator_options.get(name, {}))

    def grid(self) -> list[tuple[int, int]]:
        """``(nL, nF)`` pairs in the table order: by nF, then decreasing nL."""
        pairs = []
        for nF in self.full_sizes:
            if self.learning_sizes is not None:
                sizes = [nL for nL in self.learning_sizes if nL <= nF]
            else:
                sizes = [int(round(f * nF)) for f in self.learning_fractions]
            for nL in sorted(set(sizes), reverse=True):
                if nL >= self.dgp.d + 1:
                    pairs.append((nL, nF))
        return pairs

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["dgp"] = asdict(self.dgp)
        return doc


@dataclass(frozen=True)
class MetricsRow:
    estimator: str
    nL: int
    nF: int
    sigma: float
    d: int
    mse_is_f: float
    mse_f: float
    mse_fs_f: float
    mse_is_y: float
    mse_y: float
    mse_fs_y: float
    mse_fs_y_over_varY: float
    k_avg: float
    runtime_seconds: float


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def blend(in_sample_err: float, predictive_err: float, nL: int, nF: int) -> float:
    """Full-set error: ``(nL/nF) * in-sample + ((nF - nL)/nF) * predictive``."""
    if not 0 < nL <= nF:
        raise ValueError("need 0 < nL <= nF")
    if nL == nF:
        return in_sample_err
    return (nL / nF) * in_sample_err + ((nF - nL) / nF) * predictive_err


@dataclass(frozen=True)
class _Replicate:
    """Shared draws for one replicate: every estimator sees the same data."""

    learn: Dataset
    var_full: float
    test_x: np.ndarray
    test_f: np.ndarray
    test_y: np.ndarray
    noise: np.ndarray  # W x nL fresh noise vectors for the in-sample y-error


def _draw_replicate(cfg: ExperimentConfig, nL: int, nF: int, v: int) -> _Replicate:
    rng = np.random.default_rng([int(cfg.rng_seed) & 0xFFFFFFFF, nF, nL, v])
    full = generate(cfg.dgp, nF, rng)
    test = generate(cfg.dgp, cfg.nT_f, rng)
    noise = cfg.dgp.sigma * rng.standard_normal((cfg.W, nL))
    learn = full.subset(np.arange(nL))
    return _Replicate(learn, float(np.var(full.outputs)), test.inputs, test.true_frontier, test.outputs, noise)


def _replicate_errors(est: Any, rep: _Replicate) -> dict[str, float] | None:
    t0 = time.perf_counter()
    try:
        model = est.fit(rep.learn)
    except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("%s failed: %s", getattr(est, "name", est), exc)
        return None
    elapsed = time.perf_counter() - t0
    fhat = in_sample(model, rep.learn)
    f = rep.learn.true_frontier
    pred = np.asarray(model.predict(rep.test_x), dtype=float)
    return {
        "is_f": float(np.mean((fhat - f) ** 2)),
        "f": float(np.mean((pred - rep.test_f) ** 2)),
        "is_y": float(np.mean((fhat[None, :] - (f[None, :] + rep.noise)) ** 2)),
        "y": float(np.mean((pred - rep.test_y) ** 2)),
        "k": n_hyperplanes(model),
        "time": elapsed,
        "var": rep.var_full,
    }


def _mean(values: list[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else float("nan")


def sim_errors(cfg: ExperimentConfig, workers: int = 1) -> Iterator[MetricsRow]:
    """Yield one metrics row per (nL, nF) pair and estimator.

    Replicate data, testing sets and the W noise redraws are generated once
    per replicate and shared by all estimators.
    """
    estimators = [(name, make_estimator(name, **cfg.estimator_options.get(name, {}))) for name in cfg.estimators]
    if not estimators:
        return
    for nL, nF in cfg.grid():

        def run(v: int) -> list[dict[str, float] | None]:
            rep = _draw_replicate(cfg, nL, nF, v)
            return [_replicate_errors(est, rep) for _, est in estimators]

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                per_rep = list(pool.map(run, range(cfg.V)))
        else:
            per_rep = [run(v) for v in range(cfg.V)]
        for j, (name, est) in enumerate(estimators):
            ok = [r[j] for r in per_rep if r[j] is not None]
            failed = cfg.V - len(ok)
            if failed > MAX_FAILURE_SHARE * cfg.V:
                log.warning("%s at nL=%d, nF=%d: %d of %d replicates failed (partial row)", name, nL, nF, failed, cfg.V)
            if not ok:
                continue
            m = {key: _mean([r[key] for r in ok]) for key in ok[0]}
            fs_y = blend(m["is_y"], m["y"], nL, nF)
            yield MetricsRow(
                estimator=getattr(est, "name", name),
                nL=nL,
                nF=nF,
                sigma=cfg.dgp.sigma,
                d=cfg.dgp.d,
                mse_is_f=m["is_f"],
                mse_f=m["f"],
                mse_fs_f=blend(m["is_f"], m["f"], nL, nF),
                mse_is_y=m["is_y"],
                mse_y=m["y"],
                mse_fs_y=fs_y,
                mse_fs_y_over_varY=fs_y / m["var"] if m["var"] > 0 else float("nan"),
                k_avg=m["k"],
                runtime_seconds=m["time"] if cfg.record_runtime else float("nan"),
            )


def _cell(v: Any) -> Any:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def metrics_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in asdict(row).items()})
    return buf.getvalue()


def metrics_from_csv(text: str) -> list[MetricsRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        vals: dict[str, Any] = {}
        for f in fields(MetricsRow):
            raw = rec[f.name]
            if f.name == "estimator":
                vals[f.name] = raw
            elif f.name in ("nL", "nF", "d"):
                vals[f.name] = int(raw)
            else:
                vals[f.name] = float(raw) if raw != "" else float("nan")
        out.append(MetricsRow(**vals))
    return out


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[MetricsRow]:
    """All metrics rows for the configured grid (deterministic given the seed)."""
    return list(sim_errors(cfg, workers))


def with_overrides(cfg: ExperimentConfig, **kwargs: Any) -> ExperimentConfig:
    return replace(cfg, **kwargs)
