"""Experiment-based incrementality metrics, their model-based counterparts, and bootstrap intervals."""

from __future__ import annotations

import csv
import json
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from enum import Enum
from typing import IO, Any

import numpy as np

from .attribution import CreditAssignment, Normalization, conversion_totals
from .events import Corpus, UserPath, as_corpus
from .intensity import IntensityModel, segment_corpus

REPORT_SCHEMA = "mta-report/1"

# Quantities computed from the path itself; slicing on them conditions on the treatment.
PATH_DERIVED = frozenset(
    {
        "number of queries", "num_queries", "n_queries", "query_count",
        "number of ads", "num_ads", "n_ads", "ad_count",
        "number of events", "event_count", "n_events",
        "conversions", "conversion_count", "n_conversions",
    }
)


class EvaluationError(ValueError):
    pass


class Metric(str, Enum):
    ICPU = "ICPU"
    ICPT = "ICPT"
    ICPE = "ICPE"
    ICPE_PRIME = "ICPE_prime"
    PICPU = "PICPU"
    PICPPE = "PICPPE"
    AICPE = "AICPE"


@dataclass(frozen=True)
class MetricReport:
    metric: Metric
    point: float
    ci_low: float
    ci_high: float
    bootstrap_replicates: int = 0
    slice: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.bootstrap_replicates >= 2 and not self.ci_low <= self.point <= self.ci_high:
            raise EvaluationError(f"{self.metric.value}: interval does not contain the point estimate")

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["metric"] = self.metric.value
        return d


def report_document(reports: Sequence[MetricReport], extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
    doc: dict[str, Any] = {"schema": REPORT_SCHEMA, "metrics": [r.to_json() for r in reports]}
    if extra:
        doc.update(extra)
    return doc


def write_report_json(reports: Sequence[MetricReport], sink: IO[str], extra: Mapping[str, Any] | None = None) -> None:
    sink.write(json.dumps(report_document(reports, extra), indent=2, sort_keys=True) + "\n")


def write_report_csv(reports: Sequence[MetricReport], sink: IO[str]) -> None:
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(["metric", "point", "ci_low", "ci_high", "slice"])
    for r in reports:
        w.writerow([r.metric.value, repr(r.point), repr(r.ci_low), repr(r.ci_high), r.slice])


# ----------------------------------------------------------------------------
# Ground-truth metrics


def _group(c: Corpus | Sequence[UserPath], what: str) -> Corpus:
    c = as_corpus(c)
    if c.n_users == 0:
        raise EvaluationError(f"{what} group is empty")
    return c


def _conversions(c: Corpus) -> float:
    return float(len(c.conv_t))


def _time(c: Corpus) -> float:
    return float((c.end - c.start).sum())


def icpu(exposed: Corpus | Sequence[UserPath], unexposed: Corpus | Sequence[UserPath]) -> float:
    """Incremental conversions per user."""
    e, u = _group(exposed, "exposed"), _group(unexposed, "unexposed")
    return _conversions(e) / e.n_users - _conversions(u) / u.n_users


def icpt(exposed: Corpus | Sequence[UserPath], unexposed: Corpus | Sequence[UserPath]) -> float:
    """Incremental conversions per unit of observation time."""
    e, u = _group(exposed, "exposed"), _group(unexposed, "unexposed")
    return _conversions(e) / _time(e) - _conversions(u) / _time(u)


def _exposed_conversions(e: Corpus) -> float:
    n = _conversions(e)
    if n <= 0:
        raise EvaluationError("the exposed group has no conversions")
    return n


def icpe(exposed: Corpus | Sequence[UserPath], unexposed: Corpus | Sequence[UserPath]) -> float:
    """Incremental conversions per exposed conversion."""
    e = _group(exposed, "exposed")
    return icpu(e, unexposed) * e.n_users / _exposed_conversions(e)


def icpe_prime(exposed: Corpus | Sequence[UserPath], unexposed: Corpus | Sequence[UserPath]) -> float:
    """Time-based variant of ICPE; equals it when all windows have the same length."""
    e = _group(exposed, "exposed")
    return icpt(e, unexposed) * _time(e) / _exposed_conversions(e)


# ----------------------------------------------------------------------------
# Model-based metrics


def predicted_conversions(model: IntensityModel, corpus: Corpus | Sequence[UserPath]) -> np.ndarray:
    """Expected conversions per user under ``model`` (sum of lambda * exposure over segments)."""
    corpus = as_corpus(corpus)
    keys = model.keys_for(corpus)
    table = segment_corpus(model.spec, corpus, keys)
    mu = np.exp(table.design @ model.vector(keys)) * table.exposure
    return np.bincount(table.user, weights=mu, minlength=corpus.n_users)


def predicted_metrics(
    model: IntensityModel, exposed: Corpus | Sequence[UserPath], unexposed: Corpus | Sequence[UserPath]
) -> dict[str, float]:
    """PICPU and PICPPE: ICPU and ICPE with conversions replaced by predicted conversions."""
    e, u = _group(exposed, "exposed"), _group(unexposed, "unexposed")
    pe = predicted_conversions(model, e).sum()
    pu = predicted_conversions(model, u).sum()
    picpu = pe / e.n_users - pu / u.n_users
    if pe <= 0:
        raise EvaluationError("the model predicts no exposed conversions")
    return {"PICPU": float(picpu), "PICPPE": float(picpu * e.n_users / pe)}


def credit_per_user(
    model: IntensityModel, exposed: Corpus | Sequence[UserPath], incremental: bool = False
) -> np.ndarray:
    """Total normalized ad credit summed over each user's conversions.

    Both backwards elimination and Shapley give the ads a total of
    ``lambda(t*, all ads) - lambda(t*, no ads)``, so the sum is rule-free.
    """
    e = as_corpus(exposed)
    full, empty = conversion_totals(model, e, incremental)
    return np.bincount(e.conv_user, weights=(full - empty) / full, minlength=e.n_users)


def aicpe(
    model: IntensityModel,
    exposed: Corpus | Sequence[UserPath],
    rule: str = "backwards_elimination",
    incremental: bool = False,
) -> float:
    """Attributed incremental conversions per exposed conversion.

    ``rule`` is accepted for interface symmetry; both rules share totals.
    """
    e = _group(exposed, "exposed")
    n = _exposed_conversions(e)
    return float(credit_per_user(model, e, incremental).sum() / n)


def normalized_ad_total(a: CreditAssignment) -> float:
    """Total ad credit of one conversion expressed as a fraction of lambda(t*)."""
    if a.normalization is Normalization.NORMALIZED:
        return a.total_ad_credit
    if a.normalization is Normalization.RAW:
        full = a.baseline_credit + a.total_ad_credit
        if full <= 0:
            raise EvaluationError("raw credits with non-positive total intensity")
        return a.total_ad_credit / full
    raise EvaluationError("non-baseline-normalized credits always sum to one and cannot give AICPE")


def aicpe_from_credits(credits: Sequence[CreditAssignment]) -> float:
    if not credits:
        raise EvaluationError("the exposed group has no conversions")
    return float(sum(normalized_ad_total(a) for a in credits) / len(credits))


# ----------------------------------------------------------------------------
# Resampling


Resamplable = Corpus | np.ndarray


def _take(group: Resamplable, idx: np.ndarray) -> Resamplable:
    return group.take(idx) if isinstance(group, Corpus) else np.asarray(group)[idx]


def _size(group: Resamplable) -> int:
    return group.n_users if isinstance(group, Corpus) else len(group)


def bootstrap_replicates(
    metric: Callable[..., float],
    groups: Sequence[Resamplable],
    replicates: int,
    seed: int,
    workers: int = 1,
) -> np.ndarray:
    """Metric values over ``replicates`` resamples of users, each group resampled within itself."""
    sizes = [_size(g) for g in groups]
    children = np.random.SeedSequence(seed).spawn(replicates)

    def one(ss: np.random.SeedSequence) -> float:
        rng = np.random.default_rng(ss)
        return float(metric(*[_take(g, rng.integers(0, n, size=n)) for g, n in zip(groups, sizes)]))

    if workers > 1 and replicates > 1:
        from joblib import Parallel, delayed

        vals = Parallel(n_jobs=workers)(delayed(one)(ss) for ss in children)
    else:
        vals = [one(ss) for ss in children]
    return np.asarray(vals, dtype=float)


def bootstrap_ci(
    metric: Callable[..., float],
    groups: Sequence[Resamplable] | Resamplable,
    replicates: int = 200,
    seed: int = 0,
    workers: int = 1,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval over users."""
    if replicates < 2:
        raise EvaluationError("bootstrap needs at least 2 replicates")
    if isinstance(groups, (Corpus, np.ndarray)):
        groups = [groups]
    vals = bootstrap_replicates(metric, list(groups), replicates, seed, workers)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def block_jackknife(
    estimator: Callable[[Corpus], float], corpus: Corpus | Sequence[UserPath], blocks: int = 10
) -> tuple[float, float]:
    """(estimate, standard error) from leave-one-block-out refits over contiguous user blocks."""
    corpus = as_corpus(corpus)
    if blocks < 2 or blocks > corpus.n_users:
        raise EvaluationError("blocks must be between 2 and the number of users")
    full = float(estimator(corpus))
    edges = np.linspace(0, corpus.n_users, blocks + 1).astype(np.int64)
    ids = np.arange(corpus.n_users)
    loo = np.array(
        [estimator(corpus.take(np.concatenate([ids[: edges[b]], ids[edges[b + 1] :]]))) for b in range(blocks)]
    )
    se = float(np.sqrt((blocks - 1) / blocks * ((loo - loo.mean()) ** 2).sum()))
    return full, se


# ----------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class UserTable:
    """Per-user quantities that every metric here is a ratio of sums over."""

    conversions: np.ndarray
    time: np.ndarray
    predicted: np.ndarray | None = None
    credit: np.ndarray | None = None

    @classmethod
    def build(cls, corpus: Corpus, model: IntensityModel | None = None, with_credit: bool = False,
              incremental: bool = False) -> UserTable:
        return cls(
            conversions=corpus.conversion_counts.astype(float),
            time=corpus.end - corpus.start,
            predicted=None if model is None else predicted_conversions(model, corpus),
            credit=credit_per_user(model, corpus, incremental) if (model is not None and with_credit) else None,
        )

    def stack(self) -> np.ndarray:
        cols = [self.conversions, self.time]
        cols.append(self.predicted if self.predicted is not None else np.zeros_like(self.time))
        cols.append(self.credit if self.credit is not None else np.zeros_like(self.time))
        return np.column_stack(cols)


def _ratio_metrics(e: np.ndarray, u: np.ndarray) -> dict[Metric, float]:
    """Metrics from stacked user tables (columns: conversions, time, predicted, credit)."""
    ne, nu = len(e), len(u)
    se, su = e.sum(axis=0), u.sum(axis=0)
    out: dict[Metric, float] = {}
    cpu = se[0] / ne - su[0] / nu
    cpt = se[0] / se[1] - su[0] / su[1]
    out[Metric.ICPU] = cpu
    out[Metric.ICPT] = cpt
    out[Metric.ICPE] = cpu * ne / se[0] if se[0] > 0 else float("nan")
    out[Metric.ICPE_PRIME] = cpt * se[1] / se[0] if se[0] > 0 else float("nan")
    pcpu = se[2] / ne - su[2] / nu
    out[Metric.PICPU] = pcpu
    out[Metric.PICPPE] = pcpu * ne / se[2] if se[2] > 0 else float("nan")
    out[Metric.AICPE] = se[3] / se[0] if se[0] > 0 else float("nan")
    return out


def evaluate(
    exposed: Corpus | Sequence[UserPath],
    unexposed: Corpus | Sequence[UserPath],
    model: IntensityModel | None = None,
    credit: np.ndarray | None = None,
    replicates: int = 200,
    seed: int = 0,
    workers: int = 1,
    slice_label: str = "",
    incremental: bool = False,
) -> list[MetricReport]:
    """All metrics with percentile bootstrap intervals.

    ``credit`` (per exposed user, total normalized ad credit) overrides the
    model-computed AICPE numerator, e.g. when reading an attribution file.
    Model-based metrics are skipped when no model is given; AICPE is skipped
    when neither model nor credit is given.
    """
    e, u = _group(exposed, "exposed"), _group(unexposed, "unexposed")
    _exposed_conversions(e)
    te = UserTable.build(e, model, with_credit=model is not None and credit is None, incremental=incremental)
    if credit is not None:
        te = UserTable(te.conversions, te.time, te.predicted, np.asarray(credit, dtype=float))
    tu = UserTable.build(u, model)
    E, U = te.stack(), tu.stack()
    wanted = [Metric.ICPU, Metric.ICPT, Metric.ICPE, Metric.ICPE_PRIME]
    if model is not None:
        wanted += [Metric.PICPU, Metric.PICPPE]
    if te.credit is not None:
        wanted.append(Metric.AICPE)
    point = _ratio_metrics(E, U)

    if replicates >= 2:
        reps = _vector_bootstrap(E, U, wanted, replicates, seed, workers)
        lo, hi = np.nanquantile(reps, [0.025, 0.975], axis=0)
    out = []
    for i, m in enumerate(wanted):
        p = float(point[m])
        if replicates >= 2:
            # the percentile interval need not cover the point; widen to keep the report well-formed
            out.append(MetricReport(m, p, min(float(lo[i]), p), max(float(hi[i]), p), replicates, slice_label))
        else:
            out.append(MetricReport(m, p, p, p, max(replicates, 0), slice_label))
    return out


def _vector_bootstrap(E: np.ndarray, U: np.ndarray, names: list[Metric], replicates: int, seed: int, workers: int) -> np.ndarray:
    children = np.random.SeedSequence(seed).spawn(replicates)

    def one(ss: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(ss)
        a = E[rng.integers(0, len(E), size=len(E))]
        b = U[rng.integers(0, len(U), size=len(U))]
        m = _ratio_metrics(a, b)
        return np.array([m[n] for n in names])

    if workers > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=workers)(delayed(one)(ss) for ss in children)
    else:
        rows = [one(ss) for ss in children]
    return np.vstack(rows)


def sliced_metrics(
    metric: Callable[[Corpus, Corpus], float],
    exposed: Corpus | Sequence[UserPath],
    unexposed: Corpus | Sequence[UserPath],
    slice_feature: str,
    replicates: int = 0,
    seed: int = 0,
    name: Metric = Metric.ICPE,
) -> dict[str, MetricReport]:
    """``metric`` per level of a user feature, with optional bootstrap intervals.

    Only features fixed before the experiment are valid; quantities derived
    from the path (such as the number of queries) are refused because they
    can be affected by the ads themselves.
    """
    e, u = as_corpus(exposed), as_corpus(unexposed)
    if slice_feature.lower() in PATH_DERIVED:
        raise EvaluationError(
            f"refusing to slice on {slice_feature!r}: it is derived from the path and may be affected by the ads"
        )
    if slice_feature not in e.user_features and slice_feature not in u.user_features:
        raise EvaluationError(
            f"{slice_feature!r} is not a user feature; only pre-experiment user features may be sliced on"
        )
    fe, fu = e.user_feature(slice_feature), u.user_feature(slice_feature)
    levels = sorted({str(v) for v in fe if v is not None} | {str(v) for v in fu if v is not None})
    out = {}
    for level in levels:
        se = e.take(np.flatnonzero(fe == level))
        su = u.take(np.flatnonzero(fu == level))
        p = float(metric(se, su))
        if replicates >= 2:
            lo, hi = bootstrap_ci(metric, [se, su], replicates, seed)
            out[level] = MetricReport(name, p, min(lo, p), max(hi, p), replicates, f"{slice_feature}={level}")
        else:
            out[level] = MetricReport(name, p, p, p, 0, f"{slice_feature}={level}")
    return out
