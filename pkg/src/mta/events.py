"""Path/event data model, ingestion and the columnar corpus view.

A :class:`UserPath` is the per-user object model used by the single-path
operations (attribution of one conversion, expected credit, ...).  Bulk work
(simulation, segmentation of whole corpora, fitting) runs on :class:`Corpus`,
a columnar struct-of-arrays holding the same information.
"""

from __future__ import annotations

import io
import json
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Any

import numpy as np

PATHS_SCHEMA = "mta-paths/1"


class PathFormatError(ValueError):
    """Raised for malformed or invalid path records."""

    def __init__(self, message: str, lineno: int | None = None) -> None:
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class EventKind(str, Enum):
    AD = "ad"
    CONVERSION = "conversion"


# tie-break rank at equal timestamps: ad/query events sort before conversions
_KIND_RANK = {EventKind.AD: 0, EventKind.CONVERSION: 1}


class FeatureValues(Mapping[str, str]):
    """Immutable, hashable name -> level map."""

    __slots__ = ("_items",)

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]] = ()) -> None:
        items = dict(entries)
        for name, level in items.items():
            if not isinstance(name, str) or not name:
                raise ValueError(f"feature names must be non-empty strings, got {name!r}")
            if not isinstance(level, str) or not level:
                raise ValueError(f"feature {name!r}: levels must be non-empty strings, got {level!r}")
        self._items = dict(sorted(items.items()))

    def __getitem__(self, key: str) -> str:
        return self._items[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self) -> int:
        return hash(tuple(self._items.items()))

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Mapping):
            return self._items == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"FeatureValues({self._items!r})"


@dataclass(frozen=True)
class ObservationWindow:
    start: float
    end: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValueError("window bounds must be finite")
        if not self.start < self.end:
            raise ValueError(f"window start must be < end, got [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end


@dataclass(frozen=True)
class Event:
    """An ad/query event or a conversion.

    For ``AD`` events ``shown`` distinguishes an ad actually served (which is
    also a query event) from a pure query whose ad was withheld.
    """

    kind: EventKind
    t: float
    shown: bool = True
    features: FeatureValues = field(default_factory=FeatureValues)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not isinstance(self.features, FeatureValues):
            object.__setattr__(self, "features", FeatureValues(self.features))
        if self.kind is EventKind.CONVERSION and not self.shown:
            raise ValueError("conversion events always have shown=True")

    @property
    def is_ad(self) -> bool:
        """True for a served ad (not a withheld query, not a conversion)."""
        return self.kind is EventKind.AD and self.shown


@dataclass(frozen=True)
class UserPath:
    user_id: str
    window: ObservationWindow
    events: tuple[Event, ...] = ()
    user_features: FeatureValues = field(default_factory=FeatureValues)

    def __post_init__(self) -> None:
        if not isinstance(self.user_features, FeatureValues):
            object.__setattr__(self, "user_features", FeatureValues(self.user_features))
        for ev in self.events:
            if not self.window.contains(ev.t):
                raise ValueError(
                    f"user {self.user_id}: event outside window at t={ev.t} "
                    f"(window [{self.window.start}, {self.window.end}])"
                )
        # stable sort keeps input order among exact ties
        ordered = sorted(self.events, key=lambda ev: (ev.t, _KIND_RANK[ev.kind]))
        object.__setattr__(self, "events", tuple(ordered))

    @property
    def queries(self) -> tuple[Event, ...]:
        """All ad/query events, shown or withheld."""
        return tuple(ev for ev in self.events if ev.kind is EventKind.AD)

    @property
    def ads(self) -> tuple[Event, ...]:
        return tuple(ev for ev in self.events if ev.is_ad)

    @property
    def conversion_times(self) -> tuple[float, ...]:
        return tuple(ev.t for ev in self.events if ev.kind is EventKind.CONVERSION)

    def conversion_count(self, t: float) -> int:
        """Y(t): number of conversions at or before ``t``."""
        return sum(1 for c in self.conversion_times if c <= t)


def conversions_in(path: UserPath, s: float, t: float) -> int:
    """Number of conversions in ``(s, t]``."""
    if s > t:
        raise ValueError(f"interval start {s} exceeds end {t}")
    if not (path.window.contains(s) and path.window.contains(t)):
        raise ValueError(f"interval ({s}, {t}] is not inside the observation window")
    return sum(1 for c in path.conversion_times if s < c <= t)


# ----------------------------------------------------------------------------
# JSON Lines I/O


def _parse_features(raw: Any, what: str) -> FeatureValues:
    if raw is None:
        return FeatureValues()
    if not isinstance(raw, dict):
        raise ValueError(f"{what} must be an object")
    return FeatureValues({str(k): str(v) if not isinstance(v, str) else v for k, v in raw.items()})


def _parse_record(obj: Any) -> UserPath:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    user_id = obj.get("user_id")
    if not isinstance(user_id, str) or not user_id:
        raise ValueError("user_id must be a non-empty string")
    window = obj.get("window")
    if (
        not isinstance(window, list)
        or len(window) != 2
        or not all(isinstance(w, (int, float)) and not isinstance(w, bool) for w in window)
    ):
        raise ValueError("window must be a [start, end] pair of numbers")
    events = []
    for i, raw in enumerate(obj.get("events", [])):
        if not isinstance(raw, dict):
            raise ValueError(f"event {i} must be an object")
        kind = raw.get("kind")
        if kind not in ("ad", "conversion"):
            raise ValueError(f"event {i}: unknown event kind {kind!r}")
        t = raw.get("t")
        if not isinstance(t, (int, float)) or isinstance(t, bool):
            raise ValueError(f"event {i}: t must be a number")
        shown = raw.get("shown", True)
        if not isinstance(shown, bool):
            raise ValueError(f"event {i}: shown must be a boolean")
        events.append(Event(EventKind(kind), float(t), shown, _parse_features(raw.get("features"), "features")))
    return UserPath(
        user_id=user_id,
        window=ObservationWindow(float(window[0]), float(window[1])),
        events=tuple(events),
        user_features=_parse_features(obj.get("user_features"), "user_features"),
    )


def load_paths(source: IO[str] | IO[bytes] | Iterable[str] | str | bytes, schema: str = PATHS_SCHEMA) -> list[UserPath]:
    """Parse one path per non-blank line.

    Raises :class:`PathFormatError` (carrying the 1-based line number) for
    malformed JSON, invalid records, events outside the window, unknown event
    kinds and duplicate user ids.
    """
    if schema != PATHS_SCHEMA:
        raise PathFormatError(f"unsupported schema {schema!r}, expected {PATHS_SCHEMA!r}")
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        source = io.StringIO(source)
    paths: list[UserPath] = []
    seen: set[str] = set()
    for lineno, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PathFormatError(f"malformed record: {exc.msg}", lineno) from exc
        try:
            path = _parse_record(obj)
        except ValueError as exc:
            raise PathFormatError(str(exc), lineno) from exc
        if path.user_id in seen:
            raise PathFormatError(f"duplicate user_id {path.user_id!r}", lineno)
        seen.add(path.user_id)
        paths.append(path)
    return paths


def path_to_record(path: UserPath) -> dict[str, Any]:
    record: dict[str, Any] = {
        "user_id": path.user_id,
        "window": [path.window.start, path.window.end],
    }
    if path.user_features:
        record["user_features"] = dict(path.user_features)
    record["events"] = [
        {"kind": ev.kind.value, "t": ev.t, "shown": ev.shown, "features": dict(ev.features)} for ev in path.events
    ]
    return record


def dump_paths(paths: Iterable[UserPath], sink: IO[str]) -> None:
    for path in paths:
        sink.write(json.dumps(path_to_record(path), separators=(",", ":")))
        sink.write("\n")


# ----------------------------------------------------------------------------
# Columnar corpus


def _offsets(counts: np.ndarray) -> np.ndarray:
    out = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return out


@dataclass(frozen=True, eq=False)
class Corpus:
    """Struct-of-arrays view of a list of paths.

    Events are the ad/query events only, sorted by (user, time) with input
    order kept among ties; conversions are stored separately.  Missing
    feature values are ``None`` in the object arrays.
    """

    user_ids: np.ndarray  # (U,) object
    start: np.ndarray  # (U,)
    end: np.ndarray  # (U,)
    user_features: dict[str, np.ndarray]
    ev_offsets: np.ndarray  # (U+1,)
    ev_t: np.ndarray
    ev_shown: np.ndarray
    ev_features: dict[str, np.ndarray]
    conv_offsets: np.ndarray  # (U+1,)
    conv_t: np.ndarray

    def __len__(self) -> int:
        return len(self.start)

    @property
    def n_users(self) -> int:
        return len(self.start)

    @property
    def ev_user(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users), np.diff(self.ev_offsets))

    @property
    def conv_user(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users), np.diff(self.conv_offsets))

    @property
    def event_counts(self) -> np.ndarray:
        return np.diff(self.ev_offsets)

    @property
    def conversion_counts(self) -> np.ndarray:
        return np.diff(self.conv_offsets)

    @property
    def ad_ordinal(self) -> np.ndarray:
        """0-based index of each shown ad among its user's shown ads; -1 for withheld queries."""
        shown = self.ev_shown.astype(np.int64)
        csum = np.cumsum(shown)
        before_user = np.concatenate(([0], csum))[self.ev_offsets[:-1]]
        ordinal = csum - 1 - np.repeat(before_user, self.event_counts)
        return np.where(self.ev_shown, ordinal, -1)

    @classmethod
    def from_paths(cls, paths: Sequence[UserPath]) -> Corpus:
        n = len(paths)
        ev_counts = np.zeros(n, dtype=np.int64)
        conv_counts = np.zeros(n, dtype=np.int64)
        ev_t: list[float] = []
        ev_shown: list[bool] = []
        ev_feats: list[FeatureValues] = []
        conv_t: list[float] = []
        for i, p in enumerate(paths):
            for ev in p.events:
                if ev.kind is EventKind.AD:
                    ev_t.append(ev.t)
                    ev_shown.append(ev.shown)
                    ev_feats.append(ev.features)
                    ev_counts[i] += 1
                else:
                    conv_t.append(ev.t)
                    conv_counts[i] += 1
        ev_names = sorted({k for f in ev_feats for k in f})
        user_names = sorted({k for p in paths for k in p.user_features})
        ev_features = {k: np.array([f.get(k) for f in ev_feats], dtype=object) for k in ev_names}
        user_features = {k: np.array([p.user_features.get(k) for p in paths], dtype=object) for k in user_names}
        return cls(
            user_ids=np.array([p.user_id for p in paths], dtype=object),
            start=np.array([p.window.start for p in paths], dtype=float),
            end=np.array([p.window.end for p in paths], dtype=float),
            user_features=user_features,
            ev_offsets=_offsets(ev_counts),
            ev_t=np.array(ev_t, dtype=float),
            ev_shown=np.array(ev_shown, dtype=bool),
            ev_features=ev_features,
            conv_offsets=_offsets(conv_counts),
            conv_t=np.array(conv_t, dtype=float),
        )

    def path(self, i: int) -> UserPath:
        lo, hi = self.ev_offsets[i], self.ev_offsets[i + 1]
        events = []
        for e in range(lo, hi):
            feats = {k: v[e] for k, v in self.ev_features.items() if v[e] is not None}
            events.append(Event(EventKind.AD, float(self.ev_t[e]), bool(self.ev_shown[e]), FeatureValues(feats)))
        for c in range(self.conv_offsets[i], self.conv_offsets[i + 1]):
            events.append(Event(EventKind.CONVERSION, float(self.conv_t[c])))
        ufeats = {k: v[i] for k, v in self.user_features.items() if v[i] is not None}
        return UserPath(
            user_id=str(self.user_ids[i]),
            window=ObservationWindow(float(self.start[i]), float(self.end[i])),
            events=tuple(events),
            user_features=FeatureValues(ufeats),
        )

    def to_paths(self) -> list[UserPath]:
        return [self.path(i) for i in range(self.n_users)]

    def take(self, idx: np.ndarray) -> Corpus:
        """Sub-corpus of users ``idx`` (repeats allowed, e.g. for bootstrap)."""
        idx = np.asarray(idx, dtype=np.int64)
        ev_sel = _ragged_index(self.ev_offsets, idx)
        conv_sel = _ragged_index(self.conv_offsets, idx)
        return Corpus(
            user_ids=self.user_ids[idx],
            start=self.start[idx],
            end=self.end[idx],
            user_features={k: v[idx] for k, v in self.user_features.items()},
            ev_offsets=_offsets(self.event_counts[idx]),
            ev_t=self.ev_t[ev_sel],
            ev_shown=self.ev_shown[ev_sel],
            ev_features={k: v[ev_sel] for k, v in self.ev_features.items()},
            conv_offsets=_offsets(self.conversion_counts[idx]),
            conv_t=self.conv_t[conv_sel],
        )

    def with_conversions(self, conv_user: np.ndarray, conv_t: np.ndarray) -> Corpus:
        """Copy with conversions replaced; inputs need not be sorted."""
        conv_user = np.asarray(conv_user, dtype=np.int64)
        conv_t = np.asarray(conv_t, dtype=float)
        order = order_by_user_time(conv_user, conv_t)
        counts = np.bincount(conv_user, minlength=self.n_users)
        return Corpus(
            user_ids=self.user_ids,
            start=self.start,
            end=self.end,
            user_features=self.user_features,
            ev_offsets=self.ev_offsets,
            ev_t=self.ev_t,
            ev_shown=self.ev_shown,
            ev_features=self.ev_features,
            conv_offsets=_offsets(counts),
            conv_t=conv_t[order],
        )

    def user_feature(self, name: str) -> np.ndarray:
        if name not in self.user_features:
            return np.full(self.n_users, None, dtype=object)
        return self.user_features[name]


def order_by_user_time(user: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Stable permutation sorting by (user, t); ties keep input order.

    A single float key ``user * span + t`` sorts much faster than a two-key
    lexsort; the result is verified and the exact lexsort used if rounding
    merged distinct times.
    """
    if len(t) == 0:
        return np.zeros(0, dtype=np.int64)
    lo = float(t.min())
    span = float(t.max()) - lo + 1.0
    order = np.argsort(user * span + (t - lo), kind="stable")
    su, st = user[order], t[order]
    du = np.diff(su)
    dt = np.diff(st)
    if (du >= 0).all() and ((du > 0) | (dt >= 0)).all():
        # equal (user, t) pairs must also keep their input order
        tie = (du == 0) & (dt == 0)
        if not tie.any() or (np.diff(order)[tie] > 0).all():
            return order
    return np.lexsort((t, user))


def _ragged_index(offsets: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Flat element indices of the rows ``idx`` of a CSR layout."""
    counts = (offsets[1:] - offsets[:-1])[idx]
    if counts.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    starts = offsets[:-1][idx]
    row_begin = np.repeat(_offsets(counts)[:-1], counts)
    return np.repeat(starts, counts) + np.arange(counts.sum()) - row_begin


def concat_corpora(parts: Sequence[Corpus]) -> Corpus:
    if not parts:
        return Corpus.from_paths([])
    ev_names = sorted({k for p in parts for k in p.ev_features})
    user_names = sorted({k for p in parts for k in p.user_features})

    def col(p: Corpus, store: str, name: str, n: int) -> np.ndarray:
        d = getattr(p, store)
        return d[name] if name in d else np.full(n, None, dtype=object)

    return Corpus(
        user_ids=np.concatenate([p.user_ids for p in parts]),
        start=np.concatenate([p.start for p in parts]),
        end=np.concatenate([p.end for p in parts]),
        user_features={
            k: np.concatenate([col(p, "user_features", k, p.n_users) for p in parts]) for k in user_names
        },
        ev_offsets=_offsets(np.concatenate([p.event_counts for p in parts])),
        ev_t=np.concatenate([p.ev_t for p in parts]),
        ev_shown=np.concatenate([p.ev_shown for p in parts]),
        ev_features={k: np.concatenate([col(p, "ev_features", k, len(p.ev_t)) for p in parts]) for k in ev_names},
        conv_offsets=_offsets(np.concatenate([p.conversion_counts for p in parts])),
        conv_t=np.concatenate([p.conv_t for p in parts]),
    )


def as_corpus(data: Corpus | Sequence[UserPath]) -> Corpus:
    return data if isinstance(data, Corpus) else Corpus.from_paths(list(data))


def write_corpus(corpus: Corpus, sink: IO[str]) -> None:
    """Serialize a corpus as ``mta-paths/1`` JSON Lines without materialising UserPath objects."""
    ev_off, conv_off = corpus.ev_offsets, corpus.conv_offsets
    ev_t = corpus.ev_t.tolist()
    ev_shown = corpus.ev_shown.tolist()
    ev_feats = {k: v.tolist() for k, v in corpus.ev_features.items()}
    conv_t = corpus.conv_t.tolist()
    ufeats = {k: v.tolist() for k, v in corpus.user_features.items()}
    for i in range(corpus.n_users):
        # merge ads and conversions in time order; ads first on ties
        events = []
        for e in range(ev_off[i], ev_off[i + 1]):
            feats = {k: v[e] for k, v in ev_feats.items() if v[e] is not None}
            events.append((ev_t[e], 0, {"kind": "ad", "t": ev_t[e], "shown": ev_shown[e], "features": feats}))
        for c in range(conv_off[i], conv_off[i + 1]):
            events.append((conv_t[c], 1, {"kind": "conversion", "t": conv_t[c], "shown": True, "features": {}}))
        events.sort(key=lambda x: (x[0], x[1]))
        record: dict[str, Any] = {"user_id": str(corpus.user_ids[i]), "window": [float(corpus.start[i]), float(corpus.end[i])]}
        uf = {k: v[i] for k, v in ufeats.items() if v[i] is not None}
        if uf:
            record["user_features"] = dict(sorted(uf.items()))
        record["events"] = [e[2] for e in events]
        sink.write(json.dumps(record, separators=(",", ":")))
        sink.write("\n")
