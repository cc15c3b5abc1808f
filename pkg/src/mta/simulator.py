"""Synthetic path corpora: the four reference scenarios plus a custom generator.

Randomness is counter-based: every uniform variate is a hash of
``(seed, dataset, user, stream, counter)``, so a user's path depends only on
those indices and never on how users are chunked across workers.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from .events import Corpus, _offsets, concat_corpora, order_by_user_time, write_corpus
from .intensity import (
    INTERCEPT,
    Always,
    CoefficientKey,
    ExactCount,
    FeatureEquals,
    IntensityModel,
    ModelSpec,
    StepBasis,
    TermSpec,
    segment_corpus,
)

MANIFEST_SCHEMA = "mta-sim-manifest/1"
SCENARIO_SCHEMA = "mta-scenario/1"

BASELINE_RATE = 1.0 / 30.0
STEP_BOUNDARIES = (1.0, 2.0, 30.0)
TYPE1_MULTIPLIERS = (2.0, 1.5, 1.2)
TYPE2_MULTIPLIERS = {"2": (1.5, 1.2, 1.0), "3": (1.0, 1.0, 1.0), "4": (1.5, 1.2, 1.0)}

FULL_SCALE_USERS = 1_000_000
FULL_SCALE_DATASETS = 500
DESK_USERS = 200_000
DESK_DATASETS = 50

# stream identifiers for the counter-based generator
_S_AD_COUNT, _S_AD_TIME, _S_AD_FEATURE, _S_CONV_COUNT, _S_CONV_TIME = 1, 2, 3, 4, 5
_CONV_SLOT_BITS = 24

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, dataset: int, user: np.ndarray, stream: int, counter: np.ndarray | int) -> np.ndarray:
    """Uniform(0, 1) variates, one per (user, counter) pair, open at both ends."""
    user = np.asarray(user, dtype=np.uint64)
    counter = np.broadcast_to(np.asarray(counter, dtype=np.uint64), user.shape)
    with np.errstate(over="ignore"):
        h = _mix(np.full(user.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) + _GOLDEN)
        h = _mix(h ^ (np.uint64(dataset) * _GOLDEN + np.uint64(1)))
        h = _mix(h ^ (user * _M1 + np.uint64(2)))
        h = _mix(h ^ (np.uint64(stream) * _M2 + np.uint64(3)))
        h = _mix(h ^ (counter * _GOLDEN + np.uint64(4)))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class UserStream:
    """The deterministic random substream of one (seed, dataset, user)."""

    seed: int
    dataset_index: int
    user_index: int

    def uniforms(self, stream: int, counters: Sequence[int] | np.ndarray) -> np.ndarray:
        counters = np.asarray(counters, dtype=np.uint64)
        return counter_uniforms(self.seed, self.dataset_index, np.full(counters.shape, self.user_index), stream, counters)


def rng_stream(seed: int, dataset_index: int, user_index: int) -> UserStream:
    return UserStream(seed, dataset_index, user_index)


def poisson_inverse_cdf(u: np.ndarray, mean: np.ndarray) -> np.ndarray:
    out = stats.poisson.ppf(u, mean)
    out = np.where(mean > 0, out, 0.0)
    return out.astype(np.int64)


# ----------------------------------------------------------------------------
# Scenario definitions


@dataclass(frozen=True)
class AdCountLaw:
    """Ads per user: fixed, or Poisson(mean) clipped to [low, high]."""

    kind: str = "fixed"
    count: int = 1
    mean: float = 2.0
    low: int = 1
    high: int = 3

    def probabilities(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "fixed":
            return np.array([self.count]), np.array([1.0])
        if self.kind == "clipped_poisson":
            ks = np.arange(self.low, self.high + 1)
            p = stats.poisson.pmf(ks, self.mean)
            p[0] = stats.poisson.cdf(self.low, self.mean)
            p[-1] = stats.poisson.sf(self.high - 1, self.mean)
            return ks, p
        raise ValueError(f"unknown ad-count law {self.kind!r}")

    def draw(self, u: np.ndarray) -> np.ndarray:
        ks, p = self.probabilities()
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        return ks[np.searchsorted(cdf, u, side="left")]


@dataclass(frozen=True)
class CustomScenario:
    """A generating model plus how to lay out ads.

    ``ad_features`` lists, per ad-feature name, the levels drawn uniformly for
    each ad; ``slot_features`` instead fixes a level per ad slot (the slot
    list length must cover the maximum ad count).
    """

    model: IntensityModel
    ad_count: AdCountLaw = AdCountLaw()
    ad_features: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    slot_features: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    fit_spec: ModelSpec | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": SCENARIO_SCHEMA,
            "model": self.model.to_json(),
            "ad_count": asdict(self.ad_count),
            "ad_features": {k: list(v) for k, v in self.ad_features.items()},
            "slot_features": {k: list(v) for k, v in self.slot_features.items()},
            "fit_spec": None if self.fit_spec is None else self.fit_spec.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> CustomScenario:
        if obj.get("schema") != SCENARIO_SCHEMA:
            raise ValueError(f"expected schema {SCENARIO_SCHEMA!r}, got {obj.get('schema')!r}")
        fit_spec = obj.get("fit_spec")
        return cls(
            model=IntensityModel.from_json(obj["model"]),
            ad_count=AdCountLaw(**obj.get("ad_count", {})),
            ad_features={k: tuple(v) for k, v in obj.get("ad_features", {}).items()},
            slot_features={k: tuple(v) for k, v in obj.get("slot_features", {}).items()},
            fit_spec=None if fit_spec is None else ModelSpec.from_json(fit_spec),
        )


def _step_term(name: str, level: str | None = None, k: int | None = None) -> TermSpec:
    cond: Any = Always() if level is None else FeatureEquals("type", level)
    if k is not None:
        cond = ExactCount(cond, k)
    return TermSpec(name, StepBasis(STEP_BOUNDARIES), conditioning=cond)


def _coefs(name: str, multipliers: Sequence[float], level: str = "") -> dict[CoefficientKey, float]:
    return {CoefficientKey(name, l, level): math.log(m) for l, m in enumerate(multipliers)}


def scenario_definition(scenario: str, window_days: float = 30.0) -> CustomScenario:
    """Generating model, ad layout and fitted spec of a reference scenario ``"1"``..``"4"``."""
    base = {INTERCEPT: math.log(BASELINE_RATE)}
    if scenario == "1":
        spec = ModelSpec((_step_term("ad"),))
        model = IntensityModel(spec, {**base, **_coefs("ad", TYPE1_MULTIPLIERS)})
        return CustomScenario(model, AdCountLaw("fixed", 1), fit_spec=spec)
    if scenario in ("2", "3", "4"):
        spec = ModelSpec((_step_term("type1", "1"), _step_term("type2", "2")))
        coefs = {**base, **_coefs("type1", TYPE1_MULTIPLIERS, "1"), **_coefs("type2", TYPE2_MULTIPLIERS[scenario], "2")}
        model = IntensityModel(spec, coefs)
        if scenario != "4":
            return CustomScenario(model, AdCountLaw("fixed", 2), slot_features={"type": ("1", "2")}, fit_spec=spec)
        fit_spec = ModelSpec(
            tuple(_step_term(f"type{i}_n{k}", str(i), k) for i in (1, 2) for k in (1, 2, 3))
        )
        return CustomScenario(
            model,
            AdCountLaw("clipped_poisson", mean=2.0, low=1, high=3),
            ad_features={"type": ("1", "2")},
            fit_spec=fit_spec,
        )
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "1"
    users: int = DESK_USERS
    window_days: float = 30.0
    datasets: int = DESK_DATASETS
    seed: int = 0
    unexposed_fraction: float = 0.0
    paired: bool = False
    custom: CustomScenario | None = None

    def __post_init__(self) -> None:
        if self.users < 1:
            raise ValueError("users must be >= 1")
        if self.datasets < 1:
            raise ValueError("datasets must be >= 1")
        if not 0.0 <= self.unexposed_fraction < 1.0:
            raise ValueError("unexposed_fraction must be in [0, 1)")
        if self.window_days <= 0:
            raise ValueError("window_days must be > 0")
        if self.scenario == "custom" and self.custom is None:
            raise ValueError("custom scenario needs a CustomScenario definition")
        if self.scenario not in ("1", "2", "3", "4", "custom"):
            raise ValueError(f"unknown scenario {self.scenario!r}")

    @property
    def definition(self) -> CustomScenario:
        if self.scenario == "custom":
            assert self.custom is not None
            return self.custom
        return scenario_definition(self.scenario, self.window_days)

    @property
    def unexposed_users(self) -> int:
        """Counterfactual users added so that they make up ``unexposed_fraction`` of all users."""
        f = self.unexposed_fraction
        return int(round(self.users * f / (1.0 - f))) if f > 0 else 0

    def to_json(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "users": self.users,
            "window_days": self.window_days,
            "datasets": self.datasets,
            "seed": self.seed,
            "unexposed_fraction": self.unexposed_fraction,
            "paired": self.paired,
            "unexposed_users": self.unexposed_users,
            "custom": None if self.custom is None else self.custom.to_json(),
        }


# ----------------------------------------------------------------------------
# Generation


def _layout(
    config: ScenarioConfig,
    dataset_index: int,
    users: np.ndarray,
    layout_users: np.ndarray,
    shown: bool,
) -> Corpus:
    """Event layout (no conversions) for ``users``; draws come from ``layout_users``' streams."""
    d = config.definition
    seed, ds, W = config.seed, dataset_index, config.window_days
    n = len(users)
    n_ads = d.ad_count.draw(counter_uniforms(seed, ds, layout_users, _S_AD_COUNT, 0)).astype(np.int64)
    slot = np.arange(n_ads.sum()) - np.repeat(_offsets(n_ads)[:-1], n_ads)
    owner = np.repeat(np.arange(n), n_ads)
    src = layout_users[owner]
    t = W * counter_uniforms(seed, ds, src, _S_AD_TIME, slot)
    feats: dict[str, np.ndarray] = {}
    for f_i, (name, levels) in enumerate(sorted(d.ad_features.items())):
        u = counter_uniforms(seed, ds, src, _S_AD_FEATURE, slot * 64 + f_i)
        idx = np.minimum((u * len(levels)).astype(np.int64), len(levels) - 1)
        feats[name] = np.array(levels, dtype=object)[idx]
    for name, levels in d.slot_features.items():
        if (slot >= len(levels)).any():
            raise ValueError(f"slot_features[{name!r}] is shorter than the maximum ad count")
        feats[name] = np.array(levels, dtype=object)[slot]
    order = order_by_user_time(owner, t)  # slots are generated in order, so ties keep slot order
    group = "exposed" if shown else "unexposed"
    return Corpus(
        user_ids=np.array([f"d{ds}u{u}" for u in users.tolist()], dtype=object),
        start=np.zeros(n),
        end=np.full(n, float(W)),
        user_features={"group": np.full(n, group, dtype=object)},
        ev_offsets=_offsets(n_ads),
        ev_t=t[order],
        ev_shown=np.full(len(t), shown, dtype=bool),
        ev_features={k: v[order] for k, v in feats.items()},
        conv_offsets=np.zeros(n + 1, dtype=np.int64),
        conv_t=np.zeros(0),
    )


def draw_conversions(model: IntensityModel, corpus: Corpus, seed: int, dataset_index: int, user_index: np.ndarray) -> Corpus:
    """Fill ``corpus`` with conversions drawn from ``model``, segment by segment.

    Each constant-intensity segment gets a Poisson(lambda * exposure) count
    with times uniform inside it.  ``user_index`` maps corpus rows to stream
    indices.
    """
    table = segment_corpus(model.spec, corpus, model.keys_for(corpus))
    mean = np.exp(table.design @ model.vector(table.keys)) * table.exposure
    first = np.searchsorted(table.user, table.user, side="left")
    seg_ord = np.arange(len(table)) - first
    stream_user = np.asarray(user_index)[table.user]
    counts = poisson_inverse_cdf(counter_uniforms(seed, dataset_index, stream_user, _S_CONV_COUNT, seg_ord), mean)
    if (counts >= 2**_CONV_SLOT_BITS).any():
        raise OverflowError("too many conversions in one segment")
    seg_of = np.repeat(np.arange(len(table)), counts)
    k = np.arange(counts.sum()) - np.repeat(_offsets(counts)[:-1], counts)
    u = counter_uniforms(
        seed, dataset_index, stream_user[seg_of], _S_CONV_TIME, (seg_ord[seg_of] << _CONV_SLOT_BITS) + k
    )
    lo, hi = table.lo[seg_of], table.hi[seg_of]
    conv_t = np.minimum(lo + u * (hi - lo), hi)
    return corpus.with_conversions(table.user[seg_of], conv_t)


def simulate_block(config: ScenarioConfig, dataset_index: int, lo: int, hi: int) -> Corpus:
    """Users with global index in ``[lo, hi)``; exposed first, then counterfactual unexposed users."""
    d = config.definition
    n_exp = config.users
    idx = np.arange(lo, hi, dtype=np.int64)
    parts = []
    exp_idx = idx[idx < n_exp]
    if len(exp_idx):
        layout = _layout(config, dataset_index, exp_idx, exp_idx, shown=True)
        parts.append(draw_conversions(d.model, layout, config.seed, dataset_index, exp_idx))
    unexp_idx = idx[idx >= n_exp]
    if len(unexp_idx):
        source = (unexp_idx - n_exp) % n_exp if config.paired else unexp_idx
        layout = _layout(config, dataset_index, unexp_idx, source, shown=False)
        parts.append(draw_conversions(d.model, layout, config.seed, dataset_index, unexp_idx))
    return concat_corpora(parts)


def simulate_dataset(config: ScenarioConfig, dataset_index: int, workers: int = 1, block_size: int = 50_000) -> Corpus:
    """One dataset: ``config.users`` exposed users plus the counterfactual unexposed ones.

    Unexposed users carry the same kind of queries with ``shown=false``; with
    ``config.paired`` they copy the query layout of exposed user ``k mod users``.
    """
    total = config.users + config.unexposed_users
    bounds = [(lo, min(lo + block_size, total)) for lo in range(0, total, block_size)]
    if workers > 1 and len(bounds) > 1:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=workers)(delayed(simulate_block)(config, dataset_index, lo, hi) for lo, hi in bounds)
    else:
        parts = [simulate_block(config, dataset_index, lo, hi) for lo, hi in bounds]
    return concat_corpora(parts)


def split_groups(corpus: Corpus, feature: str = "group") -> tuple[Corpus, Corpus]:
    """(exposed, unexposed) sub-corpora by the simulator's group label."""
    g = corpus.user_feature(feature)
    return corpus.take(np.flatnonzero(g == "exposed")), corpus.take(np.flatnonzero(g == "unexposed"))


def write_datasets(config: ScenarioConfig, out_dir: str | Path, workers: int = 1) -> list[Path]:
    """Write ``ds{index}.jsonl`` per dataset plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(i: int) -> Path:
        corpus = simulate_dataset(config, i)
        p = out / f"ds{i}.jsonl"
        with p.open("w", encoding="utf-8") as fh:
            write_corpus(corpus, fh)
        return p

    if workers > 1 and config.datasets > 1:
        from joblib import Parallel, delayed

        files = Parallel(n_jobs=workers)(delayed(one)(i) for i in range(config.datasets))
    else:
        files = [one(i) for i in range(config.datasets)]
    manifest = {"schema": MANIFEST_SCHEMA, "config": config.to_json(), "files": [f.name for f in files]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return files
