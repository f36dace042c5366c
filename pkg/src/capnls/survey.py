"""Manufacturing-survey ingestion and subsample-size analysis.

Value added is gross output minus intermediates, modelled as a function of
capital, labour hours, energy (energy plus fuel) and services. Records with
nonpositive value added or any nonpositive input are dropped.

The CSV schema (one row per establishment, UTF-8, header required):

    industry_code   string
    output          gross output, currency
    intermediates   intermediate consumption, currency
    capital         capital stock, currency
    labor_hours     labour, man-hours
    energy          energy expenditure, currency
    fuel            fuel expenditure, currency (added to energy on load)
    services        services expenditure, currency
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .core import Dataset
from .selection import (
    BootstrapConfig,
    RLTConfig,
    estimate_errors,
)

SURVEY_COLUMNS = (
    "industry_code",
    "output",
    "intermediates",
    "capital",
    "labor_hours",
    "energy",
    "fuel",
    "services",
)
INPUT_NAMES = ("capital", "labor", "energy", "services")


class SurveyFormatError(ValueError):
    """The survey file is unreadable or lacks required columns."""


@dataclass(frozen=True)
class SurveyRecord:
    industry_code: str
    output: float
    intermediates: float
    capital: float
    labor: float
    energy: float
    services: float

    @property
    def value_added(self) -> float:
        return self.output - self.intermediates

    @property
    def inputs(self) -> tuple[float, float, float, float]:
        return (self.capital, self.labor, self.energy, self.services)


@dataclass(frozen=True)
class LoadReport:
    records: list[SurveyRecord]
    rejected: list[tuple[int, str]]

    def __len__(self) -> int:
        return len(self.records)


def parse_survey(text: str) -> LoadReport:
    """Parse survey CSV text; malformed rows are reported by line number."""
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in SURVEY_COLUMNS if c not in header]
    if missing:
        raise SurveyFormatError(f"missing columns: {', '.join(missing)}")
    records: list[SurveyRecord] = []
    rejected: list[tuple[int, str]] = []
    for row in reader:
        line = reader.line_num
        try:
            vals = {c: float(row[c]) for c in SURVEY_COLUMNS[1:]}
        except (TypeError, ValueError):
            rejected.append((line, "non-numeric value"))
            continue
        if not all(math.isfinite(v) for v in vals.values()):
            rejected.append((line, "non-finite value"))
            continue
        code = (row["industry_code"] or "").strip()
        if not code:
            rejected.append((line, "empty industry_code"))
            continue
        records.append(
            SurveyRecord(
                code,
                vals["output"],
                vals["intermediates"],
                vals["capital"],
                vals["labor_hours"],
                vals["energy"] + vals["fuel"],
                vals["services"],
            )
        )
    return LoadReport(records, rejected)


def load_survey(path: str | Path) -> LoadReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SurveyFormatError(f"cannot read {path}: {exc}") from exc
    return parse_survey(text)


@dataclass(frozen=True)
class IndustryDataset:
    industry_code: str
    data: Dataset
    dropped_count: int


def build_industry_dataset(records: Iterable[SurveyRecord], industry_code: str) -> IndustryDataset:
    """Value-added dataset for one industry with the positivity filter applied."""
    rows = [r for r in records if r.industry_code == industry_code]
    keep = [r for r in rows if r.value_added > 0 and all(v > 0 for v in r.inputs)]
    if not keep:
        raise ValueError(f"no usable records for industry {industry_code!r}")
    x = np.array([r.inputs for r in keep], dtype=float)
    y = np.array([r.value_added for r in keep], dtype=float)
    return IndustryDataset(industry_code, Dataset(x, y), len(rows) - len(keep))


def industries(records: Iterable[SurveyRecord]) -> list[str]:
    """Industry codes ordered by decreasing record count (ties by code)."""
    counts: dict[str, int] = {}
    for r in records:
        counts[r.industry_code] = counts.get(r.industry_code, 0) + 1
    return sorted(counts, key=lambda c: (-counts[c], c))


def dataset_to_csv(ind: IndustryDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["industry_code", *INPUT_NAMES, "value_added"])
    for xi, yi in zip(ind.data.inputs, ind.data.outputs):
        w.writerow([ind.industry_code, *(repr(float(v)) for v in xi), repr(float(yi))])
    return buf.getvalue()


# ---------------------------------------------------------------- synthetic survey


@dataclass(frozen=True)
class SyntheticIndustry:
    """Recipe for one synthetic industry.

    Establishment scale is log-normal around ``scale`` with spread
    ``scale_spread`` plus a ``large_share`` of establishments ten times bigger;
    input mixes vary log-normally by ``mix_spread``. Value added follows a
    Cobb-Douglas in the four inputs with additive noise whose standard
    deviation is ``noise`` times the median value added.
    """

    code: str
    n: int
    exponents: tuple[float, float, float, float] = (0.3, 0.35, 0.1, 0.2)
    scale: float = 1000.0
    scale_spread: float = 0.5
    large_share: float = 0.05
    mix_spread: float = 0.3
    noise: float = 0.3
    bad_share: float = 0.03


def synthetic_survey(industries_: Sequence[SyntheticIndustry], seed: int = 0) -> str:
    """CSV text in the survey schema, clustered around a typical scale size.

    A ``bad_share`` of rows get negative value added or a zero input so the
    cleaning step has work to do.
    """
    rng = np.random.default_rng(seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SURVEY_COLUMNS)
    for ind in industries_:
        size = ind.scale * np.exp(ind.scale_spread * rng.standard_normal(ind.n))
        size *= np.where(rng.uniform(size=ind.n) < ind.large_share, 10.0, 1.0)
        mix = np.exp(ind.mix_spread * rng.standard_normal((ind.n, 4)))
        x = size[:, None] * mix * np.array([2.0, 0.5, 0.1, 0.4])
        alpha = np.asarray(ind.exponents)
        va_true = np.exp(np.log(x) @ alpha)
        va = va_true + ind.noise * float(np.median(va_true)) * rng.standard_normal(ind.n)
        inter = va_true * rng.uniform(0.8, 1.5, ind.n)
        bad = rng.uniform(size=ind.n) < ind.bad_share
        for i in range(ind.n):
            cap, lab, en, srv = x[i]
            y, m = va[i] + inter[i], inter[i]
            if bad[i]:
                if rng.uniform() < 0.5:
                    m = y + abs(m)
                else:
                    cap = 0.0
            fuel_share = rng.uniform(0.1, 0.4)
            w.writerow(
                [
                    ind.code,
                    f"{y:.6f}",
                    f"{m:.6f}",
                    f"{cap:.6f}",
                    f"{lab:.6f}",
                    f"{en * (1 - fuel_share):.6f}",
                    f"{en * fuel_share:.6f}",
                    f"{srv:.6f}",
                ]
            )
    return buf.getvalue()


DEFAULT_INDUSTRIES = (
    SyntheticIndustry("2811", 220, noise=0.15),
    SyntheticIndustry("2520", 180, noise=0.6, mix_spread=0.2),
    SyntheticIndustry("1541", 160, noise=0.35, exponents=(0.25, 0.4, 0.05, 0.25)),
)


# ---------------------------------------------------------------- subsample curves


@dataclass(frozen=True)
class CurvePoint:
    fraction: float
    mean_r2: float
    lo: float
    hi: float
    mean_r2_pred: float = float("nan")


@dataclass(frozen=True)
class SubsampleCurve:
    estimator: str
    points: tuple[CurvePoint, ...]

    def census_r2(self) -> float:
        for p in self.points:
            if p.fraction >= 1.0:
                return p.mean_r2
        return max(self.points, key=lambda p: p.fraction).mean_r2

    def required_fraction(self, rho: float) -> float | None:
        """Smallest fraction whose mean R²_FS reaches ``rho`` times the census value."""
        target = rho * self.census_r2()
        for p in sorted(self.points, key=lambda p: p.fraction):
            if p.mean_r2 >= target:
                return p.fraction
        return None

    def spearman(self) -> float:
        """Rank correlation of mean R²_FS with fraction."""
        pts = sorted(self.points, key=lambda p: p.fraction)
        if len(pts) < 2:
            return float("nan")
        rho = spearmanr([p.fraction for p in pts], [p.mean_r2 for p in pts]).statistic
        return float(rho)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "fraction", "mean_r2", "lo", "hi", "mean_r2_pred"])
        for p in self.points:
            w.writerow([self.estimator, *(_num(v) for v in (p.fraction, p.mean_r2, p.lo, p.hi, p.mean_r2_pred))])
        return buf.getvalue()


def _num(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def subsample_curve(
    data: Dataset,
    estimator: Any,
    fractions: Sequence[float],
    rlt: RLTConfig | None = None,
    boot: BootstrapConfig | None = None,
    workers: int = 1,
) -> SubsampleCurve:
    """Mean, min and max replicate R²_FS at each survey fraction.

    Fractions below 1 use RLT replicates; fraction 1 is the census value
    (learning MSE plus optimism), for which min = max = mean.
    """
    rlt = rlt or RLTConfig()
    points = []
    for f in sorted(float(f) for f in fractions):
        est = estimate_errors(data, estimator, f, rlt, boot, workers=workers)
        vals = np.array(est.per_replicate_r2_fs)
        points.append(CurvePoint(f, float(vals.mean()), float(vals.min()), float(vals.max()), est.r2_pred))
    return SubsampleCurve(getattr(estimator, "name", type(estimator).__name__), tuple(points))
