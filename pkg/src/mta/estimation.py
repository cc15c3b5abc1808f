"""Maximum-likelihood Poisson regression over constant-intensity segments."""

from __future__ import annotations

import json
import logging
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from scipy.special import gammaln

from .events import Corpus, UserPath, as_corpus
from .intensity import (
    INTERCEPT,
    CoefficientKey,
    IntensityModel,
    ModelSpec,
    Segment,
    SegmentTable,
    as_segment_table,
    segment_corpus,
)

logger = logging.getLogger(__name__)

FIT_REPORT_SCHEMA = "fit-report/1"
COEFFICIENT_FLOOR = -30.0


class EstimationError(ValueError):
    pass


class SeparationWarning(RuntimeWarning):
    pass


class StepControl(str, Enum):
    NEWTON = "newton"
    GRADIENT_DESCENT = "gradient_descent"


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    ridge_penalty: float = 0.0
    step_control: StepControl = StepControl.NEWTON
    learning_rate: float = 0.1  # only used by gradient descent

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be > 0")
        if self.ridge_penalty < 0:
            raise ValueError("ridge_penalty must be >= 0")
        object.__setattr__(self, "step_control", StepControl(self.step_control))


@dataclass
class FitResult:
    model: IntensityModel
    final_log_likelihood: float
    converged: bool
    iterations: int
    per_key_offset: dict[CoefficientKey, float]
    dropped_keys: list[CoefficientKey] = field(default_factory=list)
    floored_keys: list[CoefficientKey] = field(default_factory=list)
    gradient_max_norm: float = float("nan")
    trace: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def report(self) -> dict[str, Any]:
        return {
            "schema": FIT_REPORT_SCHEMA,
            "converged": self.converged,
            "iterations": self.iterations,
            "final_log_likelihood": self.final_log_likelihood,
            "gradient_max_norm": self.gradient_max_norm,
            "likelihood_trace": self.trace,
            "per_key_offset": {str(k): v for k, v in self.per_key_offset.items()},
            "dropped_keys": [str(k) for k in self.dropped_keys],
            "floored_keys": [str(k) for k in self.floored_keys],
            "warnings": self.warnings,
        }


# ----------------------------------------------------------------------------
# Likelihood


def _eta(model: IntensityModel, table: SegmentTable) -> np.ndarray:
    missing = [k for k in table.keys if k not in model.coefficients]
    if missing:
        used = table.design[:, [table.keys.index(k) for k in missing]] != 0
        if used.any():
            bad = [str(k) for k, u in zip(missing, used.any(axis=0)) if u]
            raise EstimationError(f"segments use keys absent from the model: {bad}")
    return table.design @ model.vector(table.keys)


def log_likelihood(model: IntensityModel, segments: SegmentTable | Sequence[Segment]) -> float:
    """Poisson log-likelihood over segments, without the ``-sum log(y!)`` constant.

    Each segment contributes ``-exp(eta) * exposure + y * (eta + log exposure)``.
    """
    table = as_segment_table(segments)
    eta = _eta(model, table)
    expo = table.exposure
    y = table.conversions
    ll = -np.exp(eta) * expo
    pos = y > 0
    ll[pos] += y[pos] * (eta[pos] + np.log(expo[pos]))
    return float(ll.sum())


def log_likelihood_gradient(
    model: IntensityModel, segments: SegmentTable | Sequence[Segment]
) -> dict[CoefficientKey, float]:
    """Analytic gradient of :func:`log_likelihood` with respect to each coefficient of the segments' keys."""
    table = as_segment_table(segments)
    eta = _eta(model, table)
    g = table.design.T @ (table.conversions - np.exp(eta) * table.exposure)
    return {k: float(v) for k, v in zip(table.keys, g)}


def log_likelihood_constant(segments: SegmentTable | Sequence[Segment]) -> float:
    """The omitted ``-sum log(y!)`` term, for callers needing the full likelihood."""
    y = as_segment_table(segments).conversions
    return float(-gammaln(y + 1.0).sum())


# ----------------------------------------------------------------------------
# Fitting


@dataclass(frozen=True)
class _Aggregate:
    X: np.ndarray  # unique design rows
    exposure: np.ndarray
    y: np.ndarray
    log_exposure_y: float  # sum y*log(exposure) over raw segments


def unique_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(unique rows, inverse index); fast path hashes rows by a fixed random projection."""
    if len(X) == 0:
        return X[:0], np.zeros(0, dtype=np.int64)
    proj = np.random.default_rng(12345).uniform(0.5, 1.5, size=X.shape[1])
    h = X @ proj
    _, first, inverse = np.unique(h, return_index=True, return_inverse=True)
    uniq = X[first]
    if np.array_equal(uniq[inverse], X):
        return uniq, inverse.ravel()
    rows = np.ascontiguousarray(X).view(np.dtype((np.void, X.dtype.itemsize * X.shape[1]))).ravel()
    _, first, inverse = np.unique(rows, return_index=True, return_inverse=True)
    return X[first], inverse.ravel()


def _aggregate(table: SegmentTable, cols: np.ndarray) -> _Aggregate:
    uniq, inverse = unique_rows(table.design[:, cols])
    expo = np.bincount(inverse, weights=table.exposure, minlength=len(uniq))
    y = np.bincount(inverse, weights=table.conversions, minlength=len(uniq))
    pos = table.conversions > 0
    lxy = float((table.conversions[pos] * np.log(table.exposure[pos])).sum())
    return _Aggregate(uniq, expo, y, lxy)


def _objective(beta: np.ndarray, agg: _Aggregate, ridge: np.ndarray) -> float:
    eta = agg.X @ beta
    return float((agg.y * eta - agg.exposure * np.exp(eta)).sum() - (ridge * beta * beta).sum())


def fit_segments(
    spec: ModelSpec,
    table: SegmentTable,
    config: FitConfig = FitConfig(),
) -> FitResult:
    """Fit coefficients for ``table.keys`` by penalised maximum likelihood."""
    msgs: list[str] = []
    total_y = float(table.conversions.sum())
    if total_y <= 0:
        raise EstimationError("corpus has no conversions; the intercept MLE is undefined")
    active = table.design != 0
    offsets = table.exposure @ active
    keys = list(table.keys)
    per_key_offset = {k: float(o) for k, o in zip(keys, offsets)}
    dropped = [k for k, o in zip(keys, offsets) if o <= 0 and k != INTERCEPT]
    for k in dropped:
        msgs.append(f"key {k} has zero offset and was excluded from the fit")
    keep = np.array([o > 0 or k == INTERCEPT for k, o in zip(keys, offsets)])
    cols = np.flatnonzero(keep)
    fit_keys = [keys[i] for i in cols]
    agg = _aggregate(table, cols)

    K = len(fit_keys)
    icpt = fit_keys.index(INTERCEPT)
    ridge = np.full(K, config.ridge_penalty)
    ridge[icpt] = 0.0

    beta = np.zeros(K)
    beta[icpt] = np.log(total_y / table.exposure.sum())

    # separation: non-negative column whose active rows have no conversions
    frozen = np.zeros(K, dtype=bool)
    floored: list[CoefficientKey] = []
    for j in range(K):
        if j == icpt:
            continue
        colv = agg.X[:, j]
        if (colv >= 0).all() and agg.y[colv > 0].sum() == 0:
            beta[j] = COEFFICIENT_FLOOR
            frozen[j] = True
            floored.append(fit_keys[j])
            msg = f"key {fit_keys[j]} is active only on zero-conversion segments; clamped at {COEFFICIENT_FLOOR}"
            msgs.append(msg)
            warnings.warn(msg, SeparationWarning, stacklevel=2)

    def gradient(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = agg.exposure * np.exp(agg.X @ b)
        g = agg.X.T @ (agg.y - mu) - 2.0 * ridge * b
        return g, mu

    trace = [_objective(beta, agg, ridge)]
    converged = False
    iterations = 0
    g, mu = gradient(beta)
    free = ~frozen
    for iterations in range(1, config.max_iterations + 1):
        gmax = float(np.abs(g[free]).max()) if free.any() else 0.0
        if gmax <= config.gradient_tolerance:
            converged = True
            iterations -= 1
            break
        if config.step_control is StepControl.NEWTON:
            Xf = agg.X[:, free]
            H = (Xf * mu[:, None]).T @ Xf + 2.0 * np.diag(ridge[free])
            try:
                step_free = np.linalg.solve(H, g[free])
            except np.linalg.LinAlgError:
                step_free = np.linalg.lstsq(H, g[free], rcond=None)[0]
        else:
            step_free = config.learning_rate * g[free] / total_y
        step = np.zeros(K)
        step[free] = step_free
        current = trace[-1]
        scale = 1.0
        for _ in range(60):
            cand = np.maximum(beta + scale * step, COEFFICIENT_FLOOR)
            value = _objective(cand, agg, ridge)
            # tolerance: near the optimum gains fall below rounding of the sum
            if value >= current - 1e-14 * abs(current):
                break
            scale *= 0.5
        else:
            msgs.append("step halving failed to improve the objective")
            break
        beta = cand
        trace.append(value)
        g, mu = gradient(beta)
        hit = free & (beta <= COEFFICIENT_FLOOR) & (g < 0)
        if hit.any():
            for j in np.flatnonzero(hit):
                floored.append(fit_keys[j])
                msg = f"key {fit_keys[j]} diverged to -inf; clamped at {COEFFICIENT_FLOOR}"
                msgs.append(msg)
                warnings.warn(msg, SeparationWarning, stacklevel=2)
            frozen |= hit
            free = ~frozen
    else:
        gmax = float(np.abs(g[free]).max()) if free.any() else 0.0
        converged = gmax <= config.gradient_tolerance

    gmax = float(np.abs(g[free]).max()) if free.any() else 0.0
    if not converged:
        msgs.append(f"did not converge in {config.max_iterations} iterations (gradient max-norm {gmax:.3g})")
    model = IntensityModel(spec, {k: float(b) for k, b in zip(fit_keys, beta)})
    ll = float(_objective(beta, agg, np.zeros(K)) + agg.log_exposure_y)
    return FitResult(
        model=model,
        final_log_likelihood=ll,
        converged=converged,
        iterations=iterations,
        per_key_offset=per_key_offset,
        dropped_keys=dropped,
        floored_keys=floored,
        gradient_max_norm=gmax,
        trace=[t + agg.log_exposure_y for t in trace],
        warnings=msgs,
    )


def fit(spec: ModelSpec, paths: Corpus | Sequence[UserPath], config: FitConfig = FitConfig()) -> FitResult:
    """Segment the paths under ``spec`` and fit by Poisson regression (exposure as offset)."""
    corpus = as_corpus(paths)
    table = segment_corpus(spec, corpus)
    return fit_segments(spec, table, config)


# ----------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class Diagnostics:
    log_likelihood: float
    poisson_loss: float
    prediction_bias: float | None  # None when there are no observed conversions
    predicted: float
    observed: float
    slices: Mapping[str, Mapping[str, Diagnostics]] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "log_likelihood": self.log_likelihood,
            "poisson_loss": self.poisson_loss,
            "prediction_bias": self.prediction_bias,
            "predicted": self.predicted,
            "observed": self.observed,
            "slices": {f: {lv: d.to_json() for lv, d in per.items()} for f, per in self.slices.items()},
        }


def _diagnose(eta: np.ndarray, expo: np.ndarray, y: np.ndarray) -> Diagnostics:
    mu = np.exp(eta) * expo
    ll = -mu
    pos = y > 0
    ll[pos] += y[pos] * (eta[pos] + np.log(expo[pos]))
    dev = 2.0 * (mu - y)
    dev[pos] += 2.0 * y[pos] * np.log(y[pos] / mu[pos])
    observed = float(y.sum())
    predicted = float(mu.sum())
    bias = predicted / observed - 1.0 if observed > 0 else None
    return Diagnostics(
        log_likelihood=float(ll.sum()),
        poisson_loss=float(dev.mean()) if len(dev) else 0.0,
        prediction_bias=bias,
        predicted=predicted,
        observed=observed,
    )


def fit_diagnostics(
    model: IntensityModel,
    segments: SegmentTable | Sequence[Segment],
    slice_by: Sequence[str] = (),
) -> Diagnostics:
    """Log-likelihood, mean Poisson deviance and prediction bias, optionally per user-feature level."""
    table = as_segment_table(segments)
    eta = _eta(model, table)
    y = table.conversions.astype(float)
    overall = _diagnose(eta, table.exposure, y)
    if not slice_by:
        return overall
    if table.corpus is None:
        raise ValueError("slicing needs segments produced from a corpus")
    slices: dict[str, dict[str, Diagnostics]] = {}
    for feat in slice_by:
        levels = table.corpus.user_feature(feat)[table.user]
        per: dict[str, Diagnostics] = {}
        for level in sorted({lv for lv in levels.tolist() if lv is not None}):
            sel = levels == level
            per[level] = _diagnose(eta[sel], table.exposure[sel], y[sel])
        slices[feat] = per
    return Diagnostics(
        overall.log_likelihood, overall.poisson_loss, overall.prediction_bias, overall.predicted, overall.observed, slices
    )


# ----------------------------------------------------------------------------
# Replicates


@dataclass(frozen=True)
class ReplicateRow:
    mean: float
    q025: float
    q975: float
    n: int


def replicate_summary(estimates: Sequence[IntensityModel]) -> dict[CoefficientKey, ReplicateRow]:
    """Mean and 2.5/97.5% quantiles (linear interpolation) of exp(coefficient) across replicates.

    A key missing from some replicates (dropped for lack of data) is
    summarised over the replicates that have it.
    """
    if len(estimates) < 2:
        raise ValueError("need at least 2 replicates")
    spec = estimates[0].spec
    for m in estimates[1:]:
        if m.spec != spec:
            raise ValueError("replicates do not share one model spec")
    keys: dict[CoefficientKey, None] = {}
    for m in estimates:
        for k in m.coefficients:
            keys.setdefault(k, None)
    out = {}
    for k in keys:
        vals = np.exp([m.coefficients[k] for m in estimates if k in m.coefficients])
        q = np.quantile(vals, [0.025, 0.975])
        out[k] = ReplicateRow(float(vals.mean()), float(q[0]), float(q[1]), len(vals))
    return out


def dump_fit(result: FitResult) -> tuple[str, str]:
    """(model JSON, fit-report JSON) texts."""
    return result.model.dumps(), json.dumps(result.report(), indent=2, sort_keys=True)
