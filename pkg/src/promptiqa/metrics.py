"""SRCC / PLCC between predictions and subjective scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.stats import rankdata

from promptiqa.errors import UndefinedCorrelationError
from promptiqa.prompting import TaskKind


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} targets")
    if x.size < 2:
        raise UndefinedCorrelationError("correlation needs at least two points")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.dot(dx, dx))
    sy = np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation of a constant vector is undefined")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def srcc(pred, target) -> float:
    """Spearman correlation with average ranks for ties."""
    x, y = _pair(pred, target)
    return _pearson(rankdata(x), rankdata(y))


def srcc_closed_form(pred, target) -> float:
    """``1 - 6 sum d^2 / (M (M^2 - 1))``; exact only when neither vector has ties."""
    x, y = _pair(pred, target)
    m = x.size
    d = rankdata(x) - rankdata(y)
    return float(1 - 6 * np.dot(d, d) / (m * (m * m - 1)))


def logistic_4p(x, b1, b2, b3, b4):
    return (b1 - b2) / (1 + np.exp(-(x - b3) / np.abs(b4))) + b2


def _logistic_jacobian(x, b1, b2, b3, b4):
    # analytic, because finite differences stall when b3 starts near zero
    scale = np.abs(b4)
    s = 1 / (1 + np.exp(-(x - b3) / scale))
    slope = (b1 - b2) * s * (1 - s)
    return np.stack([s, 1 - s, -slope / scale,
                     -slope * (x - b3) / scale**2 * np.sign(b4)], axis=1)


def logistic_remap(pred, target) -> np.ndarray:
    """Fit the 4-parameter logistic commonly used before PLCC in IQA work."""
    x, y = _pair(pred, target)
    p0 = [y.max(), y.min(), float(np.mean(x)), float(np.std(x)) or 1.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        try:
            params, _ = curve_fit(logistic_4p, x, y, p0=p0, jac=_logistic_jacobian,
                                   maxfev=10000)
        except RuntimeError:
            return x
    return logistic_4p(x, *params)


def plcc(pred, target, logistic: bool = False) -> float:
    x, y = _pair(pred, target)
    if logistic:
        x = logistic_remap(x, y)
    return _pearson(x, y)


@dataclass
class EvalResult:
    predictions: np.ndarray
    targets: np.ndarray
    srcc: float
    plcc: float
    task: TaskKind
    names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": TaskKind(self.task).value,
            "srcc": self.srcc,
            "plcc": self.plcc,
            "samples": [
                {"name": n, "prediction": float(p), "target": float(t)}
                for n, p, t in zip(self.names or [""] * len(self.predictions),
                                   self.predictions, self.targets)
            ],
        }


def evaluate_predictions(pred, target, task: TaskKind, names=None,
                         logistic: bool = False) -> EvalResult:
    x, y = _pair(pred, target)
    return EvalResult(x, y, srcc(x, y), plcc(x, y, logistic), TaskKind(task), list(names or []))
