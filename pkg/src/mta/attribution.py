"""Per-conversion credit: backwards elimination, Shapley values, synergy and expected credit."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import IO, Any

import numpy as np

from .events import Corpus, UserPath, as_corpus
from .intensity import (
    IntensityModel,
    SegmentationError,
    design_matrix,
    segment_corpus,
)

CREDIT_SCHEMA = "mta-credit/1"
SHAPLEY_MAX_ADS = 15
_MASK_BITS = 62


class AttributionError(ValueError):
    pass


class Rule(str, Enum):
    BACKWARDS_ELIMINATION = "backwards_elimination"
    SHAPLEY = "shapley"


class Normalization(str, Enum):
    RAW = "raw"
    NORMALIZED = "normalized"
    NON_BASELINE_NORMALIZED = "non_baseline_normalized"


@dataclass(frozen=True)
class SynergyReport:
    """Per-ad marginal ``m({A_j})`` and per-step synergy ``S(A(j-1), A_j)``, indexed by ad order."""

    marginal: tuple[float, ...]
    synergy: tuple[float, ...]


@dataclass(frozen=True)
class CreditAssignment:
    user_id: str
    conversion_time: float
    rule: Rule
    normalization: Normalization
    baseline_credit: float
    ad_credits: tuple[float, ...]  # ad j (1-based) -> ad_credits[j - 1]
    ad_times: tuple[float, ...]
    incremental: bool = False
    synergy: SynergyReport | None = None

    @property
    def total_ad_credit(self) -> float:
        return float(sum(self.ad_credits))

    def to_record(self) -> dict[str, Any]:
        return {
            "schema": CREDIT_SCHEMA,
            "user_id": self.user_id,
            "t_star": self.conversion_time,
            "rule": self.rule.value,
            "normalization": self.normalization.value,
            "incremental": self.incremental,
            "baseline": self.baseline_credit,
            "credits": [
                {"ad_index": j + 1, "t": t, "credit": c}
                for j, (t, c) in enumerate(zip(self.ad_times, self.ad_credits))
            ],
        }

    @classmethod
    def from_record(cls, obj: dict[str, Any]) -> CreditAssignment:
        if obj.get("schema", CREDIT_SCHEMA) != CREDIT_SCHEMA:
            raise AttributionError(f"expected schema {CREDIT_SCHEMA!r}, got {obj.get('schema')!r}")
        credits = sorted(obj["credits"], key=lambda c: c["ad_index"])
        return cls(
            user_id=str(obj["user_id"]),
            conversion_time=float(obj["t_star"]),
            rule=Rule(obj["rule"]),
            normalization=Normalization(obj["normalization"]),
            baseline_credit=float(obj["baseline"]),
            ad_credits=tuple(float(c["credit"]) for c in credits),
            ad_times=tuple(float(c["t"]) for c in credits),
            incremental=bool(obj.get("incremental", False)),
        )


def dump_credits(assignments: Sequence[CreditAssignment], sink: IO[str]) -> None:
    for a in assignments:
        sink.write(json.dumps(a.to_record(), sort_keys=True) + "\n")


def load_credits(source: IO[str]) -> list[CreditAssignment]:
    out = []
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            out.append(CreditAssignment.from_record(json.loads(line)))
        except (KeyError, TypeError, ValueError) as exc:
            raise AttributionError(f"line {lineno}: malformed credit record ({exc})") from exc
    return out


# ----------------------------------------------------------------------------
# Intensity under ad subsets


def _ads_before(corpus: Corpus, user: int, t_star: float) -> np.ndarray:
    """Times of the served ads of ``user`` at or before ``t_star``, in ad order."""
    lo, hi = corpus.ev_offsets[user], corpus.ev_offsets[user + 1]
    shown = corpus.ev_shown[lo:hi]
    t = corpus.ev_t[lo:hi][shown]
    return t[t <= t_star]


def _lambda(
    model: IntensityModel,
    corpus: Corpus,
    users: np.ndarray,
    t: np.ndarray,
    *,
    prefix: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    incremental: bool = False,
) -> np.ndarray:
    keys = model.keys_for(corpus)
    X = design_matrix(model.spec, corpus, users, t, keys, prefix=prefix, mask=mask, incremental=incremental)
    return np.exp(X @ model.vector(keys))


def _path_corpus(path: UserPath, conversion_index: int) -> tuple[Corpus, float]:
    times = path.conversion_times
    if not 0 <= conversion_index < len(times):
        raise AttributionError(f"conversion_index {conversion_index} out of range for {len(times)} conversions")
    return Corpus.from_paths([path]), times[conversion_index]


def _normalize(
    baseline: float, credits: np.ndarray, full: float, normalization: Normalization
) -> tuple[float, np.ndarray]:
    if normalization is Normalization.RAW:
        return baseline, credits
    if normalization is Normalization.NORMALIZED:
        return baseline / full, credits / full
    total = credits.sum()
    if total == 0:
        raise AttributionError("degenerate normalization: total ad credit is zero")
    return 0.0, credits / total


def _synergy_report(model: IntensityModel, corpus: Corpus, t_star: float, raw: np.ndarray, empty: float, incremental: bool) -> SynergyReport | None:
    n = len(raw)
    if n > _MASK_BITS:
        return None
    masks = np.left_shift(np.ones(n, dtype=np.int64), np.arange(n))
    single = _lambda(
        model, corpus, np.zeros(n, dtype=np.int64), np.full(n, t_star), mask=masks, incremental=incremental
    )
    m = single - empty
    return SynergyReport(marginal=tuple(m.tolist()), synergy=tuple((raw - m).tolist()))


def backwards_elimination(
    model: IntensityModel,
    path: UserPath,
    conversion_index: int = 0,
    normalization: Normalization = Normalization.RAW,
    incremental: bool = False,
) -> CreditAssignment:
    """Remove ads last to first; ad ``j`` gets ``lambda(t*, A(j)) - lambda(t*, A(j-1))``.

    With ``incremental`` every query effect stays in place, so the baseline is
    the intensity with all query effects and no ad effects.
    """
    normalization = Normalization(normalization)
    corpus, t_star = _path_corpus(path, conversion_index)
    ad_t = _ads_before(corpus, 0, t_star)
    n = len(ad_t)
    lam = _lambda(
        model, corpus, np.zeros(n + 1, dtype=np.int64), np.full(n + 1, t_star),
        prefix=np.arange(n + 1), incremental=incremental,
    )
    raw = np.diff(lam)
    syn = _synergy_report(model, corpus, t_star, raw, float(lam[0]), incremental)
    baseline, credits = _normalize(float(lam[0]), raw, float(lam[-1]), normalization)
    return CreditAssignment(
        user_id=path.user_id,
        conversion_time=t_star,
        rule=Rule.BACKWARDS_ELIMINATION,
        normalization=normalization,
        baseline_credit=baseline,
        ad_credits=tuple(credits.tolist()),
        ad_times=tuple(ad_t.tolist()),
        incremental=incremental,
        synergy=syn,
    )


def _popcount(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.int64)
    out = np.zeros_like(x)
    while x.any():
        out += x & 1
        x = x >> 1
    return out


def _shapley_weights(n: int) -> np.ndarray:
    """``w[s] = s! (n - s - 1)! / n!`` for coalitions of size ``s`` not containing the player."""
    return np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])


def shapley_values(v: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values from a table ``v[mask]`` of all ``2**n`` coalition values."""
    masks = np.arange(1 << n, dtype=np.int64)
    size = _popcount(masks)
    w = _shapley_weights(n) if n else np.zeros(0)
    phi = np.zeros(n)
    for j in range(n):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        phi[j] = (w[size[without]] * (v[without | bit] - v[without])).sum()
    return phi


def shapley(
    model: IntensityModel,
    path: UserPath,
    conversion_index: int = 0,
    normalization: Normalization = Normalization.RAW,
    incremental: bool = False,
    max_ads: int = SHAPLEY_MAX_ADS,
) -> CreditAssignment:
    """Exact Shapley credit with payoff ``v(O) = lambda(t*, O) - lambda(t*, {})``.

    Coalitions that are not prefixes are evaluated with only their ads
    present; conditioning on other events is recomputed on that subset.
    """
    normalization = Normalization(normalization)
    corpus, t_star = _path_corpus(path, conversion_index)
    ad_t = _ads_before(corpus, 0, t_star)
    n = len(ad_t)
    if n > max_ads:
        raise AttributionError(
            f"{n} ads exceed the exact Shapley cap of {max_ads}; a sampling estimator would be needed"
        )
    masks = np.arange(1 << n, dtype=np.int64)
    lam = _lambda(
        model, corpus, np.zeros(len(masks), dtype=np.int64), np.full(len(masks), t_star),
        mask=masks, incremental=incremental,
    )
    phi = shapley_values(lam - lam[0], n)
    baseline, credits = _normalize(float(lam[0]), phi, float(lam[-1]), normalization)
    return CreditAssignment(
        user_id=path.user_id,
        conversion_time=t_star,
        rule=Rule.SHAPLEY,
        normalization=normalization,
        baseline_credit=baseline,
        ad_credits=tuple(credits.tolist()),
        ad_times=tuple(ad_t.tolist()),
        incremental=incremental,
    )


def attribute(
    model: IntensityModel,
    path: UserPath,
    conversion_index: int = 0,
    rule: Rule = Rule.BACKWARDS_ELIMINATION,
    normalization: Normalization = Normalization.RAW,
    incremental: bool = False,
    max_ads: int = SHAPLEY_MAX_ADS,
) -> CreditAssignment:
    if Rule(rule) is Rule.SHAPLEY:
        return shapley(model, path, conversion_index, normalization, incremental, max_ads)
    return backwards_elimination(model, path, conversion_index, normalization, incremental)


def synergy(model: IntensityModel, path: UserPath, t_star: float, j: int, incremental: bool = False) -> float:
    """``S(A(j-1), A_j) = m(A(j)) - m(A(j-1)) - m({A_j})`` for the ``j``-th ad (1-based)."""
    corpus = Corpus.from_paths([path])
    n = len(_ads_before(corpus, 0, t_star))
    if not 1 <= j <= n:
        raise AttributionError(f"ad index {j} out of range 1..{n}")
    if j > _MASK_BITS:
        raise AttributionError(f"ad index {j} beyond the supported {_MASK_BITS}")
    masks = np.array([0, (1 << j) - 1, (1 << (j - 1)) - 1, 1 << (j - 1)], dtype=np.int64)
    lam = _lambda(model, corpus, np.zeros(4, dtype=np.int64), np.full(4, t_star), mask=masks, incremental=incremental)
    m = lam - lam[0]
    return float(m[1] - m[2] - m[3])


@dataclass(frozen=True)
class SynergyShareCheck:
    k: int
    synergy: float
    extra_credit: tuple[float, ...]  # Shapley credit minus marginal, per ad
    passed: bool


def shapley_synergy_share_check(
    model: IntensityModel, path: UserPath, conversion_index: int = 0, tol: float = 1e-9
) -> SynergyShareCheck:
    """Verify each ad's Shapley credit exceeds its marginal by ``synergy / k``.

    Meaningful for models whose only non-additive part is one interaction
    among all ``k`` ads; ``synergy`` is then ``m(all) - sum_j m({A_j})``.
    """
    corpus, t_star = _path_corpus(path, conversion_index)
    k = len(_ads_before(corpus, 0, t_star))
    sh = shapley(model, path, conversion_index)
    be = backwards_elimination(model, path, conversion_index)
    assert be.synergy is not None
    marginal = np.array(be.synergy.marginal)
    total = be.total_ad_credit
    s = total - marginal.sum()
    extra = np.array(sh.ad_credits) - marginal
    target = s / k if k else 0.0
    passed = bool(np.all(np.abs(extra - target) <= tol * max(1.0, abs(total))))
    return SynergyShareCheck(k=k, synergy=float(s), extra_credit=tuple(extra.tolist()), passed=passed)


# ----------------------------------------------------------------------------
# Expected credit


def expected_credit(model: IntensityModel, path: UserPath, j: int, incremental: bool = False) -> float:
    """Expected total normalized credit of ad ``j`` (1-based) over all conversions of the path.

    Equals the integral of ``lambda(t, A(j)) - lambda(t, A(j-1))`` from the
    ad's time to the window end, computed exactly over constant segments.
    """
    if not model.spec.piecewise_constant:
        raise SegmentationError("segmentation requires piecewise-constant basis")
    corpus = Corpus.from_paths([path])
    ad_t = corpus.ev_t[corpus.ev_shown]
    if not 1 <= j <= len(ad_t):
        raise AttributionError(f"ad index {j} out of range 1..{len(ad_t)}")
    start = np.array([ad_t[j - 1]])
    keys = model.keys_for(corpus)
    beta = model.vector(keys)
    total = 0.0
    for sign, k in ((1.0, j), (-1.0, j - 1)):
        table = segment_corpus(model.spec, corpus, keys, prefix=np.array([k]), incremental=incremental, start=start)
        total += sign * float((np.exp(table.design @ beta) * table.exposure).sum())
    return total


# ----------------------------------------------------------------------------
# Whole corpora


def _conversion_probes(corpus: Corpus) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(user, t*, number of served ads at or before t*) per conversion."""
    cu = corpus.conv_user
    ct = corpus.conv_t
    shown = corpus.ev_shown
    ev_u = corpus.ev_user[shown]  # events are stored sorted by (user, t)
    ev_t = corpus.ev_t[shown]
    upto = np.zeros(len(ct), dtype=np.int64)
    first_ad = np.searchsorted(ev_u, cu, side="left")
    n_user_ads = np.searchsorted(ev_u, cu, side="right") - first_ad
    for n in np.unique(n_user_ads):
        if n == 0:
            continue
        sel = np.flatnonzero(n_user_ads == n)
        idx = first_ad[sel][:, None] + np.arange(n)[None, :]
        upto[sel] = (ev_t[idx] <= ct[sel][:, None]).sum(axis=1)
    return cu, ct, upto


def conversion_totals(
    model: IntensityModel, corpus: Corpus | Sequence[UserPath], incremental: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Per conversion, ``lambda(t*)`` with all ads and with none (query effects per ``incremental``).

    Their difference is the total ad credit under both rules.
    """
    corpus = as_corpus(corpus)
    cu, ct, _ = _conversion_probes(corpus)
    both_u = np.concatenate([cu, cu])
    both_t = np.concatenate([ct, ct])
    prefix = np.concatenate([np.full(len(cu), -1), np.zeros(len(cu), dtype=np.int64)])
    lam = _lambda(model, corpus, both_u, both_t, prefix=prefix, incremental=incremental)
    return lam[: len(cu)], lam[len(cu) :]


def attribute_corpus(
    model: IntensityModel,
    corpus: Corpus | Sequence[UserPath],
    rule: Rule = Rule.BACKWARDS_ELIMINATION,
    normalization: Normalization = Normalization.RAW,
    incremental: bool = False,
    max_ads: int = SHAPLEY_MAX_ADS,
) -> list[CreditAssignment]:
    """Credit for every conversion, ordered by (user_id, conversion time)."""
    rule, normalization = Rule(rule), Normalization(normalization)
    corpus = as_corpus(corpus)
    cu, ct, n_ads = _conversion_probes(corpus)
    if rule is Rule.SHAPLEY and len(n_ads) and n_ads.max() > max_ads:
        raise AttributionError(
            f"{int(n_ads.max())} ads exceed the exact Shapley cap of {max_ads}; a sampling estimator would be needed"
        )
    n_coal = (1 << n_ads) if rule is Rule.SHAPLEY else n_ads + 1
    probe_conv = np.repeat(np.arange(len(cu)), n_coal)
    local = np.arange(n_coal.sum()) - np.repeat(np.cumsum(n_coal) - n_coal, n_coal)
    if rule is Rule.SHAPLEY:
        lam = _lambda(model, corpus, cu[probe_conv], ct[probe_conv], mask=local, incremental=incremental)
    else:
        lam = _lambda(model, corpus, cu[probe_conv], ct[probe_conv], prefix=local, incremental=incremental)
    starts = np.cumsum(n_coal) - n_coal

    out = []
    for c in range(len(cu)):
        n = int(n_ads[c])
        v = lam[starts[c] : starts[c] + n_coal[c]]
        credits = shapley_values(v - v[0], n) if rule is Rule.SHAPLEY else np.diff(v)
        baseline, credits = _normalize(float(v[0]), credits, float(v[-1]), normalization)
        u = cu[c]
        lo = corpus.ev_offsets[u]
        ad_t = corpus.ev_t[lo : corpus.ev_offsets[u + 1]][corpus.ev_shown[lo : corpus.ev_offsets[u + 1]]][:n]
        out.append(
            CreditAssignment(
                user_id=str(corpus.user_ids[u]),
                conversion_time=float(ct[c]),
                rule=rule,
                normalization=normalization,
                baseline_credit=baseline,
                ad_credits=tuple(credits.tolist()),
                ad_times=tuple(ad_t.tolist()),
                incremental=incremental,
            )
        )
    out.sort(key=lambda a: (a.user_id, a.conversion_time))
    return out
