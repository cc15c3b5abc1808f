"""Log-linear conversion intensity: model structure, evaluation and segmentation.

The log intensity of a user at time ``t`` is a sum of coefficients times
design values::

    log lambda(t) = intercept + user-level shifts + sum over terms of
                    sum_l coef[term, l, q] * value_l(t)

where, for a term with a step basis, ``value_l`` counts the qualifying events
whose age ``t - t_j`` falls in bucket ``l`` (``(b_{l-1}, b_l]`` with
``b_0 = 0``), and for an exponential basis it is the sum of
``exp(-rate_l * (t - t_j))`` over qualifying events with ``t > t_j``.

Every evaluation in the package (point evaluation, segmentation, simulation,
attribution) goes through :func:`design_matrix`, which is vectorised over
"probes": (user, time, included-ads) triples.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, ClassVar, NamedTuple

import numpy as np

from .events import Corpus, UserPath, as_corpus, order_by_user_time

MODEL_SCHEMA = "mta-model/1"

# per-chunk element budget for the (probes x events x events) blocks
_CHUNK_ELEMENTS = 2_000_000


class SegmentationError(ValueError):
    pass


class ModelSpecError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Bases


class Basis:
    """Time basis for an event effect.  Subclasses register a ``kind``."""

    kind: ClassVar[str] = ""
    piecewise_constant: ClassVar[bool] = False
    registry: ClassVar[dict[str, type[Basis]]] = {}

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        if cls.kind:
            Basis.registry[cls.kind] = cls

    @property
    def size(self) -> int:
        raise NotImplementedError

    def values(self, age: np.ndarray, qualifies: np.ndarray) -> list[np.ndarray]:
        """Per-element basis values (one array per basis element) for ages > 0."""
        raise NotImplementedError

    def to_json(self) -> dict[str, Any]:
        raise NotImplementedError

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> Basis:
        kind = obj.get("kind")
        if kind not in Basis.registry:
            raise ModelSpecError(f"unknown basis kind {kind!r}")
        return Basis.registry[kind]._from_json(obj)

    @classmethod
    def _from_json(cls, obj: Mapping[str, Any]) -> Basis:
        raise NotImplementedError


@dataclass(frozen=True)
class StepBasis(Basis):
    """Piecewise-constant effect on ``(0, b1], (b1, b2], ...``; zero after the last boundary."""

    boundaries: tuple[float, ...]
    kind: ClassVar[str] = "step"
    piecewise_constant: ClassVar[bool] = True

    def __post_init__(self) -> None:
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if not b:
            raise ModelSpecError("step basis needs at least one boundary")
        if b[0] <= 0 or any(y <= x for x, y in zip(b, b[1:])):
            raise ModelSpecError(f"step boundaries must be positive and strictly ascending, got {b}")

    @property
    def size(self) -> int:
        return len(self.boundaries)

    def bucket(self, age: np.ndarray) -> np.ndarray:
        """Bucket index per positive age; ``size`` means past the last boundary."""
        return np.searchsorted(np.asarray(self.boundaries), age, side="left")

    def values(self, age: np.ndarray, qualifies: np.ndarray) -> list[np.ndarray]:
        b = self.bucket(age)
        live = qualifies & (age > 0)  # no effect at or before the event itself
        return [(live & (b == l)).astype(float) for l in range(self.size)]

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "boundaries": list(self.boundaries)}

    @classmethod
    def _from_json(cls, obj: Mapping[str, Any]) -> StepBasis:
        return cls(tuple(obj["boundaries"]))


@dataclass(frozen=True)
class ExponentialBasis(Basis):
    """Decaying effect ``sum_l beta_l * exp(-rate_l * age)``; evaluable, not segmentable."""

    rates: tuple[float, ...]
    kind: ClassVar[str] = "exponential"

    def __post_init__(self) -> None:
        r = tuple(float(x) for x in self.rates)
        object.__setattr__(self, "rates", r)
        if not r or any(x <= 0 for x in r) or len(set(r)) != len(r):
            raise ModelSpecError(f"exponential rates must be positive and distinct, got {r}")

    @property
    def size(self) -> int:
        return len(self.rates)

    def values(self, age: np.ndarray, qualifies: np.ndarray) -> list[np.ndarray]:
        live = qualifies & (age > 0)
        safe = np.where(live, age, 0.0)
        return [np.where(live, np.exp(-rate * safe), 0.0) for rate in self.rates]

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "rates": list(self.rates)}

    @classmethod
    def _from_json(cls, obj: Mapping[str, Any]) -> ExponentialBasis:
        return cls(tuple(obj["rates"]))


# ----------------------------------------------------------------------------
# Term conditioning


@dataclass(frozen=True)
class Always:
    def to_json(self) -> dict[str, Any]:
        return {"kind": "always"}


@dataclass(frozen=True)
class FeatureEquals:
    name: str
    level: str

    def to_json(self) -> dict[str, Any]:
        return {"kind": "feature_equals", "name": self.name, "level": self.level}


@dataclass(frozen=True)
class PrecededWithin:
    """Event qualifies if an earlier event of the same class occurred less than ``delta`` days before it."""

    delta: float

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ModelSpecError("PrecededWithin delta must be > 0")

    def to_json(self) -> dict[str, Any]:
        return {"kind": "preceded_within", "delta": self.delta}


@dataclass(frozen=True)
class ExactCount:
    """Indicator that exactly ``k`` qualifying events have their age in the bucket."""

    predicate: Always | FeatureEquals | PrecededWithin
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ModelSpecError("ExactCount k must be >= 1")
        if isinstance(self.predicate, ExactCount):
            raise ModelSpecError("ExactCount cannot be nested")

    def to_json(self) -> dict[str, Any]:
        return {"kind": "exact_count", "predicate": self.predicate.to_json(), "k": self.k}


Conditioning = Always | FeatureEquals | PrecededWithin | ExactCount


def _conditioning_from_json(obj: Mapping[str, Any]) -> Conditioning:
    kind = obj.get("kind")
    if kind == "always":
        return Always()
    if kind == "feature_equals":
        return FeatureEquals(str(obj["name"]), str(obj["level"]))
    if kind == "preceded_within":
        return PrecededWithin(float(obj["delta"]))
    if kind == "exact_count":
        return ExactCount(_conditioning_from_json(obj["predicate"]), int(obj["k"]))  # type: ignore[arg-type]
    raise ModelSpecError(f"unknown conditioning kind {kind!r}")


class Effect(str, Enum):
    AD = "ad"  # summed over served ads only
    QUERY = "query"  # summed over every query, served or withheld


@dataclass(frozen=True)
class TermSpec:
    name: str
    basis: Basis
    applies_to: Effect = Effect.AD
    conditioning: Conditioning = field(default_factory=Always)

    def __post_init__(self) -> None:
        object.__setattr__(self, "applies_to", Effect(self.applies_to))
        if not self.name or "/" in self.name or self.name == INTERCEPT.term or self.name.startswith("user:"):
            raise ModelSpecError(f"invalid term name {self.name!r}")
        if isinstance(self.conditioning, ExactCount) and not self.basis.piecewise_constant:
            raise ModelSpecError("ExactCount requires a piecewise-constant basis")

    @property
    def qualifier(self) -> str:
        c = self.conditioning
        if isinstance(c, ExactCount):
            return str(c.k)
        if isinstance(c, FeatureEquals):
            return c.level
        return ""

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "applies_to": self.applies_to.value,
            "basis": self.basis.to_json(),
            "conditioning": self.conditioning.to_json(),
        }


class CoefficientKey(NamedTuple):
    term: str
    index: int = 0
    level: str = ""

    def __str__(self) -> str:
        return f"{self.term}/{self.index}/{self.level}"

    @classmethod
    def parse(cls, text: str) -> CoefficientKey:
        term, index, level = text.split("/", 2)
        return cls(term, int(index), level)


INTERCEPT = CoefficientKey("intercept", 0, "")


def user_key(feature: str, level: str) -> CoefficientKey:
    return CoefficientKey(f"user:{feature}", 0, level)


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[TermSpec, ...] = ()
    intercept_features: tuple[str, ...] = ()
    reference_levels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "intercept_features", tuple(self.intercept_features))
        object.__setattr__(self, "reference_levels", dict(sorted(dict(self.reference_levels).items())))
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ModelSpecError("term names must be unique")
        for feat in self.intercept_features:
            if feat not in self.reference_levels:
                raise ModelSpecError(f"user feature {feat!r} needs a reference level")
        for term in self.terms:
            cond = term.conditioning
            pred = cond.predicate if isinstance(cond, ExactCount) else cond
            if isinstance(pred, FeatureEquals) and self.reference_levels.get(pred.name) == pred.level:
                raise ModelSpecError(
                    f"term {term.name!r} conditions on the reference level {pred.level!r} of {pred.name!r}"
                )

    @property
    def piecewise_constant(self) -> bool:
        return all(t.basis.piecewise_constant for t in self.terms)

    def term_keys(self) -> list[CoefficientKey]:
        return [CoefficientKey(t.name, l, t.qualifier) for t in self.terms for l in range(t.basis.size)]

    def keys(self, user_levels: Mapping[str, Iterable[str]] | None = None) -> list[CoefficientKey]:
        """All coefficient keys: intercept, non-reference user levels (sorted), then term keys."""
        keys = [INTERCEPT]
        user_levels = user_levels or {}
        for feat in self.intercept_features:
            ref = self.reference_levels[feat]
            for level in sorted({lv for lv in user_levels.get(feat, ()) if lv is not None and lv != ref}):
                keys.append(user_key(feat, level))
        return keys + self.term_keys()

    def keys_for(self, corpus: Corpus) -> list[CoefficientKey]:
        levels = {f: corpus.user_feature(f).tolist() for f in self.intercept_features}
        return self.keys(levels)

    def breakpoint_offsets(self) -> np.ndarray:
        """Offsets ``b`` (including 0) such that ``t_j + b`` may change the intensity."""
        if not self.piecewise_constant:
            raise SegmentationError("segmentation requires piecewise-constant basis")
        offs = {0.0}
        for t in self.terms:
            offs.update(t.basis.boundaries)  # type: ignore[attr-defined]
        return np.array(sorted(offs))

    def to_json(self) -> dict[str, Any]:
        return {
            "intercept_features": list(self.intercept_features),
            "reference_levels": dict(self.reference_levels),
            "terms": [t.to_json() for t in self.terms],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ModelSpec:
        try:
            terms = tuple(
                TermSpec(
                    name=str(t["name"]),
                    applies_to=Effect(t.get("applies_to", "ad")),
                    basis=Basis.from_json(t["basis"]),
                    conditioning=_conditioning_from_json(t.get("conditioning", {"kind": "always"})),
                )
                for t in obj.get("terms", [])
            )
        except (KeyError, TypeError) as exc:
            raise ModelSpecError(f"malformed model spec: {exc}") from exc
        except ValueError as exc:
            raise ModelSpecError(str(exc)) from exc
        return cls(
            terms=terms,
            intercept_features=tuple(obj.get("intercept_features", ())),
            reference_levels=dict(obj.get("reference_levels", {})),
        )


@dataclass(frozen=True)
class IntensityModel:
    spec: ModelSpec
    coefficients: Mapping[CoefficientKey, float]

    def __post_init__(self) -> None:
        coefs = {CoefficientKey(*k): float(v) for k, v in dict(self.coefficients).items()}
        if INTERCEPT not in coefs:
            raise ModelSpecError("intercept coefficient is required")
        allowed_terms = {k for k in self.spec.term_keys()}
        for k, v in coefs.items():
            if not np.isfinite(v) or not (-745.0 < v < 709.0):  # exp(v) finite and positive
                raise ModelSpecError(f"coefficient {k} = {v} has no finite positive exp")
            if k == INTERCEPT or k in allowed_terms:
                continue
            feat = k.term[len("user:"):] if k.term.startswith("user:") else None
            if feat is None or feat not in self.spec.intercept_features:
                raise ModelSpecError(f"coefficient key {k} is not derivable from the spec")
        object.__setattr__(self, "coefficients", coefs)

    def vector(self, keys: Sequence[CoefficientKey]) -> np.ndarray:
        """Coefficients aligned to ``keys``; keys absent from the model count as 0."""
        return np.array([self.coefficients.get(k, 0.0) for k in keys])

    def keys_for(self, corpus: Corpus) -> list[CoefficientKey]:
        keys = self.spec.keys_for(corpus)
        extra = [k for k in self.coefficients if k not in set(keys)]
        return keys + sorted(extra)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": MODEL_SCHEMA,
            "spec": self.spec.to_json(),
            "coefficients": {str(k): v for k, v in self.coefficients.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> IntensityModel:
        if obj.get("schema") != MODEL_SCHEMA:
            raise ModelSpecError(f"expected schema {MODEL_SCHEMA!r}, got {obj.get('schema')!r}")
        spec = ModelSpec.from_json(obj["spec"])
        coefs = {CoefficientKey.parse(k): float(v) for k, v in obj.get("coefficients", {}).items()}
        return cls(spec, coefs)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def load_spec_document(obj: Mapping[str, Any]) -> ModelSpec:
    """Accept either a bare spec object or an ``mta-model/1`` document."""
    if "schema" in obj:
        if obj["schema"] != MODEL_SCHEMA:
            raise ModelSpecError(f"expected schema {MODEL_SCHEMA!r}, got {obj['schema']!r}")
        return ModelSpec.from_json(obj["spec"])
    return ModelSpec.from_json(obj)


# ----------------------------------------------------------------------------
# Design engine


def design_matrix(
    spec: ModelSpec,
    corpus: Corpus,
    probe_user: np.ndarray,
    probe_t: np.ndarray,
    keys: Sequence[CoefficientKey],
    *,
    prefix: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    incremental: bool = False,
) -> np.ndarray:
    """Design rows for a batch of probes.

    Each probe is (user index, time) plus the set of that user's served ads
    treated as present: the first ``prefix[p]`` ads (``-1`` means all) or, if
    ``mask`` is given, the ads whose 0-based ordinal bit is set.

    Removing an ad removes its ad-effect terms.  Its query-effect terms are
    removed too unless ``incremental`` is set, in which case every query keeps
    its query effect.  Conditioning that depends on other events
    (``PrecededWithin``, ``ExactCount``) is recomputed on the present events.
    """
    probe_user = np.asarray(probe_user, dtype=np.int64)
    probe_t = np.asarray(probe_t, dtype=float)
    n_probe = len(probe_user)
    col = {k: i for i, k in enumerate(keys)}
    X = np.zeros((n_probe, len(keys)))
    if n_probe == 0:
        return X
    if INTERCEPT in col:
        X[:, col[INTERCEPT]] = 1.0
    for feat in spec.intercept_features:
        levels = corpus.user_feature(feat)[probe_user]
        for k, c in col.items():
            if k.term == f"user:{feat}":
                X[:, c] = levels == k.level
    if not spec.terms:
        return X
    if prefix is not None:
        prefix = np.asarray(prefix, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.int64)

    term_cols = [[col.get(CoefficientKey(t.name, l, t.qualifier)) for l in range(t.basis.size)] for t in spec.terms]
    ad_ordinal = corpus.ad_ordinal
    counts = corpus.event_counts[probe_user]
    for n_ev in np.unique(counts):
        if n_ev == 0:
            continue
        rows = np.flatnonzero(counts == n_ev)
        step = max(1, _CHUNK_ELEMENTS // int(n_ev * n_ev))
        for lo in range(0, len(rows), step):
            chunk = rows[lo : lo + step]
            _fill_terms(
                spec, corpus, ad_ordinal, X, term_cols, chunk, int(n_ev), probe_user, probe_t,
                None if prefix is None else prefix[chunk],
                None if mask is None else mask[chunk],
                incremental,
            )
    return X


def _fill_terms(
    spec: ModelSpec,
    corpus: Corpus,
    ad_ordinal: np.ndarray,
    X: np.ndarray,
    term_cols: list[list[int | None]],
    rows: np.ndarray,
    n_ev: int,
    probe_user: np.ndarray,
    probe_t: np.ndarray,
    prefix: np.ndarray | None,
    mask: np.ndarray | None,
    incremental: bool,
) -> None:
    ev_idx = corpus.ev_offsets[probe_user[rows]][:, None] + np.arange(n_ev)[None, :]
    t_ev = corpus.ev_t[ev_idx]
    shown = corpus.ev_shown[ev_idx]
    ordinal = ad_ordinal[ev_idx]
    age = probe_t[rows][:, None] - t_ev

    present = shown.copy()
    if prefix is not None:
        present &= (prefix[:, None] < 0) | (ordinal < prefix[:, None])
    if mask is not None:
        safe = np.clip(ordinal, 0, 62)
        present &= (ordinal < 63) & (((mask[:, None] >> safe) & 1) == 1)
    classes = {
        Effect.AD: present,
        Effect.QUERY: np.ones_like(shown) if incremental else (~shown | present),
    }
    after = age > 0
    preceded_cache: dict[tuple[Effect, float], np.ndarray] = {}

    for term, cols in zip(spec.terms, term_cols):
        in_class = classes[term.applies_to]
        cond = term.conditioning
        pred = cond.predicate if isinstance(cond, ExactCount) else cond
        qual = in_class & after
        if isinstance(pred, FeatureEquals):
            feat = corpus.ev_features.get(pred.name)
            if feat is None:
                continue
            qual = qual & (feat[ev_idx] == pred.level)
        elif isinstance(pred, PrecededWithin):
            key = (term.applies_to, pred.delta)
            if key not in preceded_cache:
                gap = t_ev[:, :, None] - t_ev[:, None, :]  # [p, j, j'] = t_j - t_j'
                earlier = np.tri(n_ev, n_ev, -1, dtype=bool)[None, :, :]
                preceded_cache[key] = (earlier & (gap < pred.delta) & in_class[:, None, :]).any(axis=2)
            qual = qual & preceded_cache[key]
        values = term.basis.values(age, qual)
        for l, c in enumerate(cols):
            if c is None:
                continue
            v = values[l].sum(axis=1)
            if isinstance(cond, ExactCount):
                v = (v == cond.k).astype(float)
            X[rows, c] += v


def probe_log_intensity(
    model: IntensityModel,
    corpus: Corpus,
    probe_user: np.ndarray,
    probe_t: np.ndarray,
    *,
    prefix: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    incremental: bool = False,
) -> np.ndarray:
    keys = model.keys_for(corpus)
    X = design_matrix(
        model.spec, corpus, probe_user, probe_t, keys, prefix=prefix, mask=mask, incremental=incremental
    )
    return X @ model.vector(keys)


def count_ads_at_or_before(path: UserPath, t: float) -> int:
    return sum(1 for ev in path.ads if ev.t <= t)


def log_intensity(
    model: IntensityModel,
    path: UserPath,
    t: float,
    ad_prefix: int | None = None,
    incremental: bool = False,
) -> float:
    """log lambda(t) with only the first ``ad_prefix`` served ads present (None = all)."""
    if not path.window.contains(t):
        raise ValueError(f"t={t} outside the observation window")
    if ad_prefix is not None:
        if ad_prefix < 0:
            raise ValueError("ad_prefix must be >= 0")
        available = count_ads_at_or_before(path, t)
        if ad_prefix > available:
            raise ValueError(f"ad_prefix {ad_prefix} exceeds the {available} ads at or before t={t}")
    corpus = Corpus.from_paths([path])
    prefix = np.array([-1 if ad_prefix is None else ad_prefix])
    return float(
        probe_log_intensity(model, corpus, np.zeros(1, dtype=np.int64), np.array([t]), prefix=prefix, incremental=incremental)[0]
    )


# ----------------------------------------------------------------------------
# Segmentation


@dataclass(frozen=True)
class Segment:
    """A constant-intensity interval ``(lo, hi]`` of one path."""

    path_ref: str
    lo: float
    hi: float
    active: Mapping[CoefficientKey, float]  # key -> design value (multiplicity)
    conversions: int

    @property
    def exposure(self) -> float:
        return self.hi - self.lo

    @property
    def active_keys(self) -> frozenset[CoefficientKey]:
        return frozenset(k for k, v in self.active.items() if v != 0)


@dataclass(frozen=True, eq=False)
class SegmentTable:
    """Columnar segments of a whole corpus, ordered by (user, lo)."""

    user: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    conversions: np.ndarray
    design: np.ndarray  # (S, K)
    keys: tuple[CoefficientKey, ...]
    corpus: Corpus | None = None

    def __len__(self) -> int:
        return len(self.lo)

    @property
    def exposure(self) -> np.ndarray:
        return self.hi - self.lo

    def to_segments(self) -> list[Segment]:
        user_ids = self.corpus.user_ids if self.corpus is not None else None
        out = []
        for s in range(len(self)):
            nz = np.flatnonzero(self.design[s])
            out.append(
                Segment(
                    path_ref=str(user_ids[self.user[s]]) if user_ids is not None else str(self.user[s]),
                    lo=float(self.lo[s]),
                    hi=float(self.hi[s]),
                    active={self.keys[i]: float(self.design[s, i]) for i in nz},
                    conversions=int(self.conversions[s]),
                )
            )
        return out

    @classmethod
    def from_segments(cls, segments: Sequence[Segment], keys: Sequence[CoefficientKey] | None = None) -> SegmentTable:
        if keys is None:
            seen: dict[CoefficientKey, None] = {}
            for s in segments:
                for k in s.active:
                    seen.setdefault(k, None)
            keys = list(seen)
        col = {k: i for i, k in enumerate(keys)}
        design = np.zeros((len(segments), len(keys)))
        for i, s in enumerate(segments):
            for k, v in s.active.items():
                if k not in col:
                    raise KeyError(f"segment key {k} not among the provided keys")
                design[i, col[k]] = v
        refs = {r: i for i, r in enumerate(dict.fromkeys(s.path_ref for s in segments))}
        return cls(
            user=np.array([refs[s.path_ref] for s in segments], dtype=np.int64),
            lo=np.array([s.lo for s in segments], dtype=float),
            hi=np.array([s.hi for s in segments], dtype=float),
            conversions=np.array([s.conversions for s in segments], dtype=np.int64),
            design=design,
            keys=tuple(keys),
        )


def _breakpoints(spec: ModelSpec, corpus: Corpus, users_from: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    offsets = spec.breakpoint_offsets()
    n = corpus.n_users
    ev_user = corpus.ev_user
    cand_t = (corpus.ev_t[:, None] + offsets[None, :]).ravel()
    cand_u = np.repeat(ev_user, len(offsets))
    # lower clipping bound per user (e.g. an ad time for partial integration)
    lo_bound = corpus.start if users_from is None else users_from
    inside = (cand_t > lo_bound[cand_u]) & (cand_t < corpus.end[cand_u])
    pu = np.concatenate([np.arange(n), np.arange(n), cand_u[inside]])
    pt = np.concatenate([lo_bound, corpus.end, cand_t[inside]])
    order = order_by_user_time(pu, pt)
    return pu[order], pt[order]


def segment_corpus(
    spec: ModelSpec,
    corpus: Corpus,
    keys: Sequence[CoefficientKey] | None = None,
    *,
    prefix: np.ndarray | None = None,
    incremental: bool = False,
    start: np.ndarray | None = None,
) -> SegmentTable:
    """Split every path into maximal constant-intensity segments tiling ``(start, end]``.

    Breakpoints are the window ends plus ``t_j + b`` for every ad/query time
    and every step boundary ``b`` (and ``b = 0``).  Zero-length segments are
    dropped.  Conversions at exactly the window start fall in the first
    segment.  ``prefix``/``incremental`` (per user) and ``start`` (a per-user
    lower limit replacing the window start) exist for partial integrals.
    """
    if keys is None:
        keys = spec.keys_for(corpus)
    pu, pt = _breakpoints(spec, corpus, start)
    same = pu[1:] == pu[:-1]
    lo, hi, su = pt[:-1][same], pt[1:][same], pu[:-1][same]
    keep = hi > lo
    lo, hi, su = lo[keep], hi[keep], su[keep]

    X = design_matrix(
        spec, corpus, su, 0.5 * (lo + hi), keys,
        prefix=None if prefix is None else np.asarray(prefix)[su],
        incremental=incremental,
    )
    conv = _assign_conversions(corpus, su, hi)
    return SegmentTable(user=su, lo=lo, hi=hi, conversions=conv, design=X, keys=tuple(keys), corpus=corpus)


def _assign_conversions(corpus: Corpus, seg_user: np.ndarray, seg_hi: np.ndarray) -> np.ndarray:
    """Conversions per segment: a conversion at time c goes to the first segment with hi >= c."""
    n_seg = len(seg_hi)
    if len(corpus.conv_t) == 0 or n_seg == 0:
        return np.zeros(n_seg, dtype=np.int64)
    cu, ct = corpus.conv_user, corpus.conv_t
    # sort segment ends and conversions together, conversions first so that, on ties, a conversion sorts before its segment end
    u = np.concatenate([cu, seg_user])
    t = np.concatenate([ct, seg_hi])
    is_seg = order_by_user_time(u, t) >= len(ct)
    # global index of the next segment at or after each conversion in sort order
    seg_rank = np.cumsum(is_seg) - is_seg  # segments strictly before
    target = seg_rank[~is_seg]
    # conversions beyond a user's last segment cannot happen for in-window times;
    # ones before the user's first segment hi still map to that first segment.
    keep = (target < n_seg)
    target = target[keep]
    return np.bincount(target, minlength=n_seg).astype(np.int64)


def segment_path(spec: ModelSpec, path: UserPath) -> list[Segment]:
    corpus = Corpus.from_paths([path])
    return segment_corpus(spec, corpus).to_segments()


def total_offset_by_key(segments: SegmentTable | Sequence[Segment]) -> dict[CoefficientKey, float]:
    """Sum of exposures of the segments on which each key is active."""
    if isinstance(segments, SegmentTable):
        active = segments.design != 0
        sums = segments.exposure @ active
        used = active.any(axis=0)
        return {k: float(v) for k, v, u in zip(segments.keys, sums, used) if u}
    out: dict[CoefficientKey, float] = {}
    for s in segments:
        for k in s.active_keys:
            out[k] = out.get(k, 0.0) + s.exposure
    return out


def as_segment_table(segments: SegmentTable | Sequence[Segment]) -> SegmentTable:
    return segments if isinstance(segments, SegmentTable) else SegmentTable.from_segments(list(segments))
