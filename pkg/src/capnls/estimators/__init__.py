"""Production-function estimators behind one ``fit(data) -> model`` interface.

Every estimator object has a ``name`` and a ``fit`` method; every model it
returns has ``predict(x)``. Piecewise-linear models also carry their
learning-set assignment so in-sample values use the assigned planes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from ..core import Dataset, PiecewiseLinearModel
from ..qp import SolverConfig
from .base import EstimationError, Estimator, FittedModel, in_sample, n_hyperplanes
from .cap import fit_cap
from .capnls import (
    CNLS_SOLVER,
    CapNlsParams,
    ModelCollection,
    Proposal,
    fit_capnls,
    fit_capnls_fast,
    fit_cnls,
    fit_partition,
    propose_partitions,
    select_parsimonious,
)
from .cobb_douglas import CobbDouglasModel, fit_cd_additive, fit_cd_multiplicative

__all__ = [
    "CAP",
    "CAPNLS",
    "CNLS",
    "CDA",
    "CDM",
    "OLS",
    "ESTIMATORS",
    "CapNlsParams",
    "CobbDouglasModel",
    "EstimationError",
    "Estimator",
    "FittedModel",
    "LinearModel",
    "ModelCollection",
    "Proposal",
    "fit_cap",
    "fit_capnls",
    "fit_capnls_fast",
    "fit_cd_additive",
    "fit_cd_multiplicative",
    "fit_cnls",
    "fit_partition",
    "in_sample",
    "make_estimator",
    "n_hyperplanes",
    "propose_partitions",
    "select_parsimonious",
]


@dataclass(frozen=True)
class CNLS:
    solver: SolverConfig = CNLS_SOLVER
    name: str = "CNLS"

    def fit(self, data: Dataset) -> PiecewiseLinearModel:
        return fit_cnls(data, self.solver)


@dataclass(frozen=True)
class CAPNLS:
    params: CapNlsParams = field(default_factory=CapNlsParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    name: str = "CAP-NLS"

    def fit(self, data: Dataset) -> PiecewiseLinearModel:
        model, _ = fit_capnls(data, self.params, self.solver)
        return model

    def with_seed(self, seed: int) -> CAPNLS:
        return replace(self, params=replace(self.params, rng_seed=seed))


@dataclass(frozen=True)
class CAP:
    params: CapNlsParams = field(default_factory=CapNlsParams)
    name: str = "CAP"

    def fit(self, data: Dataset) -> PiecewiseLinearModel:
        return fit_cap(data, self.params)

    def with_seed(self, seed: int) -> CAP:
        return replace(self, params=replace(self.params, rng_seed=seed))


@dataclass(frozen=True)
class CDA:
    n_starts: int = 5
    seed: int = 0
    fix_scale: bool = False
    name: str = "CDA"

    def fit(self, data: Dataset) -> CobbDouglasModel:
        return fit_cd_additive(data, self.n_starts, self.seed, self.fix_scale)

    def with_seed(self, seed: int) -> CDA:
        return replace(self, seed=seed)


@dataclass(frozen=True)
class CDM:
    """Log-linear Cobb-Douglas fit.

    The log transform is undefined for nonpositive outputs. Such outputs are
    routine in parametric bootstrap draws around small establishments, so by
    default the exponents are estimated from the positive observations only
    (at least ``d + 1`` of them are required). The reported SSE still covers
    every observation. Set ``drop_nonpositive=False`` to reject such data.
    """

    drop_nonpositive: bool = True
    name: str = "CDM"

    def fit(self, data: Dataset) -> CobbDouglasModel:
        keep = data.outputs > 0
        if not self.drop_nonpositive or keep.all():
            return fit_cd_multiplicative(data)
        if keep.sum() < data.d + 1:
            raise EstimationError("multiplicative Cobb-Douglas needs d + 1 positive outputs")
        sub = fit_cd_multiplicative(Dataset(data.inputs[keep], data.outputs[keep]))
        sse = float(np.sum((sub.predict(data.inputs) - data.outputs) ** 2))
        return replace(sub, sse=sse)


@dataclass(frozen=True)
class LinearModel:
    intercept: float
    coef: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.coef.size == 1 else x[None, :]
        return self.intercept + x @ self.coef


@dataclass(frozen=True)
class OLS:
    """Unconstrained linear least squares; a linear smoother with trace ``d + 1``."""

    name: str = "OLS"

    def fit(self, data: Dataset) -> LinearModel:
        xt = np.column_stack([np.ones(data.n), data.inputs])
        coef, *_ = np.linalg.lstsq(xt, data.outputs, rcond=None)
        return LinearModel(float(coef[0]), coef[1:])


ESTIMATORS: dict[str, Callable[..., Any]] = {
    "capnls": CAPNLS,
    "capnlsf": lambda **kw: CAPNLS(
        params=replace(kw.pop("params", CapNlsParams()), fast_stop=True), name="CAP-NLSF", **kw
    ),
    "cap": CAP,
    "cnls": CNLS,
    "cda": CDA,
    "cdm": CDM,
    "ols": OLS,
}


def make_estimator(name: str, **kwargs: Any) -> Any:
    """Build an estimator from its short name (``capnls``, ``cap``, ``cnls``, ...)."""
    key = name.lower().replace("-", "").replace("_", "")
    if key not in ESTIMATORS:
        raise KeyError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}")
    return ESTIMATORS[key](**kwargs)
