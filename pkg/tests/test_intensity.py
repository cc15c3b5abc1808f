import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mta.events import Corpus
from mta.intensity import (
    INTERCEPT,
    Always,
    Basis,
    CoefficientKey,
    Effect,
    ExactCount,
    ExponentialBasis,
    FeatureEquals,
    IntensityModel,
    ModelSpec,
    ModelSpecError,
    PrecededWithin,
    SegmentationError,
    SegmentTable,
    StepBasis,
    TermSpec,
    load_spec_document,
    log_intensity,
    segment_corpus,
    segment_path,
    total_offset_by_key,
)

from conftest import ad, conv, make_path, step_model, typed_model

SHORT, MEDIUM, LONG = (CoefficientKey("ad", l, "") for l in range(3))


class TestBases:
    def test_step_boundaries_validated(self):
        with pytest.raises(ValueError):
            StepBasis((2.0, 1.0))
        with pytest.raises(ValueError):
            StepBasis((0.0, 1.0))

    def test_step_buckets_half_open(self):
        b = StepBasis((1.0, 2.0, 30.0))
        vals = b.values(np.array([[0.0, 1.0, 1.5, 30.0, 30.5]]), np.ones((1, 5), dtype=bool))
        assert [v[0].tolist() for v in vals] == [
            [0, 1, 0, 0, 0],
            [0, 0, 1, 0, 0],
            [0, 0, 0, 1, 0],
        ]

    def test_exponential_rates_validated(self):
        with pytest.raises(ValueError):
            ExponentialBasis((1.0, 1.0))
        with pytest.raises(ValueError):
            ExponentialBasis((-1.0,))

    def test_exponential_basis_is_evaluable_but_not_segmentable(self):
        spec = ModelSpec((TermSpec("e", ExponentialBasis((1.0,))),))
        model = IntensityModel(spec, {INTERCEPT: 0.0, CoefficientKey("e", 0, ""): 1.0})
        p = make_path(events=[ad(10)])
        assert log_intensity(model, p, 11.0) == pytest.approx(math.exp(-1.0))
        assert log_intensity(model, p, 10.0) == 0.0
        with pytest.raises(SegmentationError, match="piecewise-constant"):
            segment_path(spec, p)

    def test_registry_round_trip(self):
        for b in (StepBasis((1.0, 5.0)), ExponentialBasis((0.5, 2.0))):
            assert Basis.from_json(json.loads(json.dumps(b.to_json()))) == b
        with pytest.raises(ModelSpecError):
            Basis.from_json({"kind": "spline"})


class TestSpec:
    def test_term_validation(self):
        with pytest.raises(ModelSpecError):
            ExactCount(Always(), 0)
        with pytest.raises(ModelSpecError):
            PrecededWithin(0.0)
        with pytest.raises(ModelSpecError):
            ModelSpec((TermSpec("a", StepBasis((1.0,))), TermSpec("a", StepBasis((2.0,)))))

    def test_reference_levels(self):
        with pytest.raises(ModelSpecError):
            ModelSpec(intercept_features=("age",))
        with pytest.raises(ModelSpecError):
            ModelSpec(
                (TermSpec("a", StepBasis((1.0,)), conditioning=FeatureEquals("age", "young")),),
                intercept_features=("age",),
                reference_levels={"age": "young"},
            )

    def test_model_requires_intercept_and_derivable_keys(self):
        spec = ModelSpec((TermSpec("a", StepBasis((1.0,))),))
        with pytest.raises(ModelSpecError):
            IntensityModel(spec, {CoefficientKey("a", 0, ""): 0.1})
        with pytest.raises(ModelSpecError):
            IntensityModel(spec, {INTERCEPT: 0.0, CoefficientKey("b", 0, ""): 0.1})
        with pytest.raises(ModelSpecError):
            IntensityModel(spec, {INTERCEPT: 1e6})

    def test_json_round_trip(self):
        spec = ModelSpec(
            (
                TermSpec("q", StepBasis((1.0, 2.0)), applies_to=Effect.QUERY),
                TermSpec("n", StepBasis((3.0,)), conditioning=ExactCount(FeatureEquals("type", "1"), 2)),
                TermSpec("p", StepBasis((3.0,)), conditioning=PrecededWithin(1.5)),
            ),
            intercept_features=("age",),
            reference_levels={"age": "old"},
        )
        model = IntensityModel(
            spec,
            {INTERCEPT: -3.0, CoefficientKey("q", 1, ""): 0.2, CoefficientKey("user:age", 0, "young"): 0.5,
             CoefficientKey("n", 0, "2"): -0.1},
        )
        again = IntensityModel.from_json(json.loads(model.dumps()))
        assert again == model
        assert load_spec_document(model.to_json()) == spec
        with pytest.raises(ModelSpecError):
            IntensityModel.from_json({"schema": "mta-model/0"})

    def test_key_string_round_trip(self):
        k = CoefficientKey("type1_n2", 1, "2")
        assert CoefficientKey.parse(str(k)) == k


class TestLogIntensity:
    def test_short_bucket(self, s1_model):
        p = make_path(events=[ad(10)])
        assert log_intensity(s1_model, p, 10.5) == pytest.approx(math.log(2.0 / 30.0), abs=1e-12)

    def test_no_effect_before_or_at_ad(self, s1_model):
        p = make_path(events=[ad(10)])
        assert log_intensity(s1_model, p, 5.0) == pytest.approx(math.log(1 / 30), abs=1e-12)
        assert log_intensity(s1_model, p, 10.0) == pytest.approx(math.log(1 / 30), abs=1e-12)

    def test_effect_ends_after_last_boundary(self):
        m = step_model(boundaries=(1.0, 2.0, 5.0))
        p = make_path(events=[ad(10)])
        assert log_intensity(m, p, 15.0) == pytest.approx(math.log(1.2 / 30))
        assert log_intensity(m, p, 15.5) == pytest.approx(math.log(1 / 30))

    def test_multiplicative_two_ads(self):
        m = typed_model((2.0, 3.0))
        p = make_path(events=[ad(1, type="1"), ad(2, type="2")])
        assert math.exp(log_intensity(m, p, 5.0)) == pytest.approx(6.0)
        assert math.exp(log_intensity(m, p, 5.0, ad_prefix=1)) == pytest.approx(2.0)
        assert math.exp(log_intensity(m, p, 5.0, ad_prefix=0)) == pytest.approx(1.0)

    def test_errors(self, s1_model):
        p = make_path(events=[ad(10)])
        with pytest.raises(ValueError):
            log_intensity(s1_model, p, 31.0)
        with pytest.raises(ValueError):
            log_intensity(s1_model, p, 5.0, ad_prefix=1)

    def test_query_effects_kept_in_incremental_mode(self):
        spec = ModelSpec(
            (TermSpec("ad", StepBasis((30.0,))), TermSpec("query", StepBasis((30.0,)), applies_to=Effect.QUERY))
        )
        m = IntensityModel(spec, {INTERCEPT: 0.0, CoefficientKey("ad", 0, ""): math.log(2.0),
                                  CoefficientKey("query", 0, ""): math.log(3.0)})
        p = make_path(events=[ad(1), ad(2, shown=False)])
        lam = lambda **kw: math.exp(log_intensity(m, p, 5.0, **kw))
        assert lam() == pytest.approx(2 * 3 * 3)
        assert lam(ad_prefix=0) == pytest.approx(3.0)  # withheld query keeps its effect
        assert lam(ad_prefix=0, incremental=True) == pytest.approx(9.0)

    def test_withheld_query_has_no_ad_effect(self, s1_model):
        p = make_path(events=[ad(10, shown=False)])
        assert log_intensity(s1_model, p, 10.5) == pytest.approx(math.log(1 / 30))

    def test_preceded_within_recomputed_on_present_ads(self):
        spec = ModelSpec((TermSpec("follow", StepBasis((30.0,)), conditioning=PrecededWithin(1.0)),))
        m = IntensityModel(spec, {INTERCEPT: 0.0, CoefficientKey("follow", 0, ""): math.log(4.0)})
        p = make_path(events=[ad(1), ad(1.5), ad(5)])
        assert math.exp(log_intensity(m, p, 10.0)) == pytest.approx(4.0)
        assert math.exp(log_intensity(m, p, 10.0, ad_prefix=1)) == pytest.approx(1.0)

    def test_exact_count_indicator(self):
        spec = ModelSpec((TermSpec("two", StepBasis((1.0, 30.0)), conditioning=ExactCount(Always(), 2)),))
        m = IntensityModel(spec, {INTERCEPT: 0.0, CoefficientKey("two", 0, "2"): math.log(5.0),
                                  CoefficientKey("two", 1, "2"): math.log(7.0)})
        p = make_path(events=[ad(1), ad(1.5), ad(1.8)])
        assert math.exp(log_intensity(m, p, 2.2)) == pytest.approx(5.0)  # two ads within 1 day
        assert math.exp(log_intensity(m, p, 2.7)) == pytest.approx(7.0)  # two ads in (1, 30]
        assert math.exp(log_intensity(m, p, 1.9)) == pytest.approx(1.0)  # three ads in the short bucket

    def test_zero_model_is_constant(self):
        m = step_model(multipliers=(1.0, 1.0, 1.0), baseline=0.25)
        p = make_path(events=[ad(3), ad(4)])
        for t in (0.0, 3.5, 4.2, 29.0):
            assert log_intensity(m, p, t) == pytest.approx(math.log(0.25))


class TestSegmentation:
    def test_single_ad(self, s1_model):
        segs = segment_path(s1_model.spec, make_path(events=[ad(10)]))
        assert [(s.lo, s.hi) for s in segs] == [(0, 10), (10, 11), (11, 12), (12, 30)]
        assert [s.active_keys - {INTERCEPT} for s in segs] == [set(), {SHORT}, {MEDIUM}, {LONG}]
        assert total_offset_by_key(segs) == {INTERCEPT: 30.0, SHORT: 1.0, MEDIUM: 1.0, LONG: 18.0}

    def test_no_events(self, s1_model):
        segs = segment_path(s1_model.spec, make_path())
        assert [(s.lo, s.hi, s.active_keys) for s in segs] == [(0, 30, frozenset({INTERCEPT}))]

    def test_clipped_at_window_end(self, s1_model):
        segs = segment_path(s1_model.spec, make_path(events=[ad(29.5)]))
        assert [(s.lo, s.hi) for s in segs] == [(0, 29.5), (29.5, 30)]
        assert segs[-1].active_keys == {INTERCEPT, SHORT}

    def test_empty_offsets(self):
        assert total_offset_by_key([]) == {}

    def test_conversion_assignment(self, s1_model):
        p = make_path(events=[ad(10), conv(0), conv(10), conv(10.5), conv(30)])
        segs = segment_path(s1_model.spec, p)
        assert [s.conversions for s in segs] == [2, 1, 0, 1]

    def test_tied_events_drop_zero_length_segments(self, s1_model):
        segs = segment_path(s1_model.spec, make_path(events=[ad(10), ad(10)]))
        assert all(s.exposure > 0 for s in segs)
        assert segs[1].active[SHORT] == 2.0

    def test_table_round_trip(self, s1_model):
        p = make_path(events=[ad(3), ad(4), conv(5)])
        table = segment_corpus(s1_model.spec, Corpus.from_paths([p]))
        again = SegmentTable.from_segments(table.to_segments(), table.keys)
        assert np.array_equal(again.design, table.design)
        assert np.array_equal(again.conversions, table.conversions)


# times on a 1/16-day grid keep segment arithmetic exact
event_times = st.lists(st.integers(0, 480).map(lambda i: i / 16.0), max_size=5)


@settings(max_examples=60, deadline=None)
@given(event_times, st.lists(st.booleans(), min_size=5, max_size=5), st.integers(1, 80).map(lambda i: i / 16.0))
def test_segments_tile_and_are_constant(times, shown, b1):
    spec = ModelSpec(
        (
            TermSpec("ad", StepBasis((b1, b1 + 3.0))),
            TermSpec("q", StepBasis((2.0,)), applies_to=Effect.QUERY),
            TermSpec("pair", StepBasis((4.0,)), conditioning=ExactCount(Always(), 2)),
        )
    )
    rng = np.random.default_rng(len(times))
    coefs = {k: float(rng.normal()) for k in spec.keys()}
    model = IntensityModel(spec, coefs)
    p = make_path(events=[ad(t, shown=s) for t, s in zip(times, shown)])
    segs = segment_path(spec, p)
    assert sum(s.exposure for s in segs) == pytest.approx(30.0, abs=1e-9)
    assert all(a.hi == b.lo for a, b in zip(segs, segs[1:]))
    for s in segs:
        eta = sum(coefs[k] * v for k, v in s.active.items())
        for frac in (0.1, 0.5, 0.9):
            t = s.lo + frac * (s.hi - s.lo)
            assert log_intensity(model, p, t) == pytest.approx(eta, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(event_times.filter(lambda ts: len(ts) >= 1), st.floats(0.0, 30.0))
def test_prefix_differs_by_the_ads_own_terms(times, t):
    m = step_model(multipliers=(2.0, 1.5, 1.2))
    p = make_path(events=[ad(x) for x in times])
    n = sum(1 for x in times if x <= t)
    ordered = sorted(times)
    for j in range(1, n + 1):
        age = t - ordered[j - 1]
        bucket = np.searchsorted([1.0, 2.0, 30.0], age, side="left") if age > 0 else None
        step = m.coefficients[CoefficientKey("ad", int(bucket), "")] if bucket is not None and bucket < 3 else 0.0
        diff = log_intensity(m, p, t, ad_prefix=j) - log_intensity(m, p, t, ad_prefix=j - 1)
        assert diff == pytest.approx(step, abs=1e-12)
