"""Cobb-Douglas fits with additive (CDA) and multiplicative (CDM) errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from ..core import Dataset
from .base import EstimationError, nonneg_slope_lstsq

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class CobbDouglasModel:
    """``y = scale * prod(x_j ** exponents_j)``."""

    scale: float
    exponents: np.ndarray
    error_form: str
    sse: float

    def __post_init__(self) -> None:
        alpha = np.asarray(self.exponents, dtype=float).ravel()
        if np.any(alpha < 0):
            raise ValueError("Cobb-Douglas exponents must be nonnegative")
        if self.scale < 0:
            raise ValueError("Cobb-Douglas scale must be nonnegative")
        alpha.setflags(write=False)
        object.__setattr__(self, "exponents", alpha)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :] if self.exponents.size > 1 else x[:, None]
        if x.shape[1] != self.exponents.size:
            raise ValueError(f"expected {self.exponents.size} inputs, got {x.shape[1]}")
        return self.scale * np.exp(np.log(x) @ self.exponents)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "exponents": self.exponents.tolist(),
            "error_form": self.error_form,
            "sse": self.sse,
        }


def _log_linear(logx: np.ndarray, logy: np.ndarray) -> tuple[float, np.ndarray]:
    xt = np.column_stack([np.ones(logx.shape[0]), logx])
    coef = nonneg_slope_lstsq((xt.T @ xt)[None], (xt.T @ logy)[None])[0]
    return float(coef[0]), coef[1:]


def fit_cd_multiplicative(data: Dataset) -> CobbDouglasModel:
    """Least squares of ``log y`` on ``(1, log x)`` with nonnegative exponents."""
    if np.any(data.outputs <= 0):
        raise EstimationError("multiplicative Cobb-Douglas needs positive outputs")
    c, alpha = _log_linear(np.log(data.inputs), np.log(data.outputs))
    model = CobbDouglasModel(float(np.exp(c)), alpha, MULTIPLICATIVE, 0.0)
    sse = float(np.sum((model.predict(data.inputs) - data.outputs) ** 2))
    return CobbDouglasModel(model.scale, alpha, MULTIPLICATIVE, sse)


def fit_cd_additive(
    data: Dataset, n_starts: int = 5, seed: int = 0, fix_scale: bool = False
) -> CobbDouglasModel:
    """Nonlinear least squares ``sum (y - A prod x^alpha)^2`` with ``A, alpha >= 0``.

    Start 1 is the log-linear fit; the others draw exponents uniformly on
    ``[0, 1]`` with the optimal scale for those exponents. The best local
    minimum over all starts is returned. With ``fix_scale`` the scale is held
    at 1 and only the exponents are estimated.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    y = data.outputs
    pos = y[y > 0]
    if pos.size == 0:
        raise EstimationError("additive Cobb-Douglas needs some positive outputs")
    d = data.d
    if fix_scale:
        sx, sy = np.ones(d), 1.0
    else:
        # geometric-mean units keep the scale parameter near 1 for survey data
        sx = np.exp(np.mean(np.log(data.inputs), axis=0))
        sy = float(np.exp(np.mean(np.log(pos))))
    logx = np.log(data.inputs / sx)
    ys = y / sy
    rng = np.random.default_rng(seed)

    floor = 1e-3 * float(np.median(pos)) / sy
    c0, a0 = _log_linear(logx, np.log(np.maximum(ys, floor)))
    starts = [(float(np.exp(c0)), a0)]
    for _ in range(n_starts - 1):
        alpha = rng.uniform(0.0, 1.0, d)
        g = np.exp(logx @ alpha)
        starts.append((max(float(g @ ys) / float(g @ g), 1e-8), alpha))

    def unpack(theta: np.ndarray) -> tuple[float, np.ndarray]:
        return (1.0, theta) if fix_scale else (theta[0], theta[1:])

    def resid(theta: np.ndarray) -> np.ndarray:
        A, alpha = unpack(theta)
        return A * np.exp(logx @ alpha) - ys

    def jac(theta: np.ndarray) -> np.ndarray:
        A, alpha = unpack(theta)
        g = np.exp(logx @ alpha)
        J_alpha = (A * g)[:, None] * logx
        return J_alpha if fix_scale else np.column_stack([g, J_alpha])

    best: tuple[float, float, np.ndarray] | None = None
    for A0, alpha0 in starts:
        theta0 = alpha0 if fix_scale else np.concatenate([[A0], alpha0])
        try:
            res = least_squares(
                resid,
                theta0,
                jac=jac,
                bounds=(np.zeros(theta0.size), np.full(theta0.size, np.inf)),
                method="trf",
                xtol=1e-15,
                ftol=1e-15,
                gtol=1e-15,
                max_nfev=5000,
            )
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        A_s, alpha = unpack(res.x)
        A = float(A_s) * sy / float(np.exp(np.log(sx) @ alpha))
        sse = float(2.0 * res.cost) * sy**2
        if best is None or sse < best[0]:
            best = (sse, A, np.maximum(alpha, 0.0))
    if best is None:
        raise EstimationError("Cobb-Douglas optimisation failed from every start")
    sse, A, alpha = best
    return CobbDouglasModel(A, alpha, ADDITIVE, sse)
