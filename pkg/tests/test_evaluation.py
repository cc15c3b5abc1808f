import io
import json
import math

import numpy as np
import pytest

from mta.attribution import Normalization, Rule, attribute_corpus
from mta.estimation import fit
from mta.events import Corpus
from mta.evaluation import (
    EvaluationError,
    Metric,
    MetricReport,
    aicpe,
    aicpe_from_credits,
    block_jackknife,
    bootstrap_ci,
    evaluate,
    icpe,
    icpe_prime,
    icpt,
    icpu,
    predicted_metrics,
    sliced_metrics,
    write_report_csv,
    write_report_json,
)
from mta.simulator import ScenarioConfig, simulate_dataset, split_groups

from conftest import ad, conv, make_path, step_model


def group(counts, window=(0.0, 30.0), prefix="u", **features):
    return [make_path(f"{prefix}{i}", [conv(1.0)] * c, window, **features) for i, c in enumerate(counts)]


@pytest.fixture(scope="module")
def s1_groups():
    cfg = ScenarioConfig(scenario="1", users=20_000, seed=21, unexposed_fraction=0.5)
    return split_groups(simulate_dataset(cfg, 0))


class TestGroundTruth:
    def test_icpu_by_hand(self):
        assert icpu(group([1, 2]), group([1, 1, 0, 0])) == pytest.approx(1.0)

    def test_identical_groups(self):
        g = group([0, 1, 3])
        assert icpu(g, g) == 0.0 and icpt(g, g) == 0.0 and icpe(g, g) == 0.0

    def test_icpt_equal_windows(self):
        e, u = group([1, 2]), group([1, 1, 0, 0])
        assert icpt(e, u) == pytest.approx(icpu(e, u) / 30, abs=1e-12)
        assert icpe_prime(e, u) == pytest.approx(icpe(e, u), abs=1e-12)

    def test_icpt_unequal_windows(self):
        e = group([1, 2])
        u = group([1, 2], window=(0.0, 60.0))
        assert icpu(e, u) == 0.0
        assert icpt(e, u) == pytest.approx(3 / 60 - 3 / 120)

    def test_icpe_by_hand(self):
        # ICPU 0.5 with 10 exposed users and 20 conversions
        e = group([2] * 10)
        u = group([1, 2] * 5)
        assert icpu(e, u) == pytest.approx(0.5)
        assert icpe(e, u) == pytest.approx(0.25)

    def test_errors(self):
        with pytest.raises(EvaluationError):
            icpu([], group([1]))
        with pytest.raises(EvaluationError):
            icpe(group([0]), group([1]))
        assert icpt(group([0]), group([0])) == 0.0


class TestModelBased:
    def test_true_model_matches_experiment(self, s1_groups, s1_model):
        e, u = s1_groups
        p = predicted_metrics(s1_model, e, u)
        truth = icpe(e, u)
        se = 0.012  # sampling error of ICPE at 20k users per arm
        assert abs(p["PICPPE"] - truth) < 3 * se
        assert aicpe(s1_model, e) == pytest.approx(p["PICPPE"], abs=0.01)

    def test_zero_effect_model(self, s1_groups):
        e, u = s1_groups
        flat = step_model((1.0, 1.0, 1.0))
        assert predicted_metrics(flat, e, u)["PICPU"] == pytest.approx(0.0, abs=1e-12)
        assert aicpe(flat, e) == 0.0

    def test_aicpe_rule_free_and_matches_credit_files(self, s1_groups, s1_model):
        e, _ = s1_groups
        sub = e.take(np.arange(500))
        direct = aicpe(s1_model, sub)
        for rule in Rule:
            for norm in (Normalization.RAW, Normalization.NORMALIZED):
                credits = attribute_corpus(s1_model, sub, rule=rule, normalization=norm)
                assert aicpe_from_credits(credits) == pytest.approx(direct, abs=1e-12)
        small = attribute_corpus(s1_model, make_path_corpus(), normalization="raw")
        assert aicpe_from_credits(small) == pytest.approx(aicpe(s1_model, make_path_corpus()), abs=1e-12)
        with pytest.raises(EvaluationError):
            aicpe_from_credits([])

    def test_aicpe_needs_conversions(self, s1_model):
        with pytest.raises(EvaluationError):
            aicpe(s1_model, [make_path("a", [ad(1)])])


def make_path_corpus():
    return [make_path("a", [ad(1), conv(1.5)]), make_path("b", [conv(3)])]


class TestBootstrap:
    def test_constant_metric(self):
        lo, hi = bootstrap_ci(lambda x: 3.0, np.ones(50), replicates=20, seed=1)
        assert lo == hi == 3.0

    def test_clt_half_width(self):
        rng = np.random.default_rng(0)
        coin = rng.choice([-1.0, 1.0], size=10_000)
        lo, hi = bootstrap_ci(np.mean, coin, replicates=400, seed=2)
        assert (hi - lo) / 2 == pytest.approx(1.96 / math.sqrt(10_000), rel=0.2)

    def test_seed_reproducible(self, s1_groups):
        e, u = s1_groups
        a = bootstrap_ci(icpe, [e.take(np.arange(300)), u.take(np.arange(300))], replicates=10, seed=5)
        b = bootstrap_ci(icpe, [e.take(np.arange(300)), u.take(np.arange(300))], replicates=10, seed=5, workers=2)
        assert a == b

    def test_needs_two_replicates(self):
        with pytest.raises(EvaluationError):
            bootstrap_ci(np.mean, np.ones(3), replicates=1)

    def test_report_interval_invariant(self):
        with pytest.raises(EvaluationError):
            MetricReport(Metric.ICPE, 0.5, 0.6, 0.7, 10)

    def test_block_jackknife(self):
        paths = group(list(np.random.default_rng(1).poisson(2.0, 400)))
        est, se = block_jackknife(lambda c: len(c.conv_t) / c.n_users, paths, blocks=10)
        assert est == pytest.approx(np.mean([len(p.conversion_times) for p in paths]))
        assert 0 < se < 0.2


class TestEvaluate:
    def test_report_contents_and_formats(self, s1_groups, s1_model):
        e, u = s1_groups
        reports = evaluate(e, u, s1_model, replicates=30, seed=3)
        names = [r.metric for r in reports]
        assert names == [Metric.ICPU, Metric.ICPT, Metric.ICPE, Metric.ICPE_PRIME, Metric.PICPU, Metric.PICPPE,
                         Metric.AICPE]
        by = {r.metric: r for r in reports}
        assert by[Metric.ICPE].point == pytest.approx(icpe(e, u))
        assert by[Metric.AICPE].point == pytest.approx(aicpe(s1_model, e))
        assert all(r.ci_low <= r.point <= r.ci_high for r in reports)
        js, cs = io.StringIO(), io.StringIO()
        write_report_json(reports, js)
        write_report_csv(reports, cs)
        assert json.loads(js.getvalue())["schema"] == "mta-report/1"
        assert cs.getvalue().splitlines()[0] == "metric,point,ci_low,ci_high,slice"
        assert evaluate(e, u, s1_model, replicates=30, seed=3) == reports

    def test_without_model(self, s1_groups):
        e, u = s1_groups
        assert [r.metric for r in evaluate(e, u, replicates=0)] == [
            Metric.ICPU, Metric.ICPT, Metric.ICPE, Metric.ICPE_PRIME
        ]


class TestSlicing:
    def test_refuses_path_derived(self):
        g = group([1, 2], region="n")
        with pytest.raises(EvaluationError, match="derived from the path"):
            sliced_metrics(icpu, g, g, "number of queries")
        with pytest.raises(EvaluationError, match="not a user feature"):
            sliced_metrics(icpu, g, g, "colour")

    def test_identical_levels(self):
        e = group([1, 2, 1, 2], prefix="e", region="n") + group([1, 2, 1, 2], prefix="f", region="s")
        u = group([1, 1, 1, 1], prefix="g", region="n") + group([1, 1, 1, 1], prefix="h", region="s")
        out = sliced_metrics(icpu, e, u, "region")
        assert out["n"].point == out["s"].point == pytest.approx(0.5)

    def test_ordered_by_construction(self):
        from mta.events import concat_corpora
        from mta.simulator import ScenarioConfig as SC

        parts = []
        for level, base in (("low", 1 / 60), ("high", 1 / 15)):
            from mta.simulator import CustomScenario, AdCountLaw

            model = step_model(baseline=base)
            cfg = SC(scenario="custom", users=20_000, seed=8, unexposed_fraction=0.5,
                     custom=CustomScenario(model, AdCountLaw("fixed", 1)))
            c = simulate_dataset(cfg, 0)
            c.user_features["tier"] = np.full(c.n_users, level, dtype=object)
            parts.append(c)
        e, u = split_groups(concat_corpora(parts))
        out = sliced_metrics(icpu, e, u, "tier", replicates=20, seed=1)
        assert out["high"].point > out["low"].point
        assert out["high"].slice == "tier=high"


CHAIN_SEEDS = 20


@pytest.fixture(scope="module")
def chain_gaps():
    """|AICPE - ICPE| under the generating model at n and 4n exposed users, per seed."""
    model = step_model()
    gaps = []
    for seed in range(CHAIN_SEEDS):
        pair = []
        for n in (20_000, 80_000):
            cfg = ScenarioConfig(scenario="1", users=n, seed=seed, unexposed_fraction=0.5)
            e, u = split_groups(simulate_dataset(cfg, 0))
            pair.append(abs(aicpe(model, e) - icpe(e, u)))
        gaps.append(pair)
    return np.array(gaps)


class TestConsistency:
    @pytest.mark.xfail(
        strict=False,
        reason="if both gaps are pure sampling noise shrinking as 1/sqrt(n), the larger sample wins "
        "in about 70-73% of seeds, so an 80% threshold fails often by chance",
    )
    def test_gap_shrinks_in_most_seeds(self, chain_gaps):
        smaller = chain_gaps[:, 1] < chain_gaps[:, 0]
        assert smaller.mean() >= 0.8

    def test_mean_gap_shrinks(self, chain_gaps):
        small, large = chain_gaps.mean(axis=0)
        assert large < small

    def test_total_normalized_credit_matches_expected_increment(self, s1_model):
        from mta.attribution import expected_credit

        cfg = ScenarioConfig(scenario="1", users=5000, seed=33)
        corpus = simulate_dataset(cfg, 0)
        credits = attribute_corpus(s1_model, corpus, normalization=Normalization.NORMALIZED)
        row = {u: i for i, u in enumerate(corpus.user_ids.tolist())}
        realized = np.zeros(corpus.n_users)
        for a in credits:
            realized[row[a.user_id]] += a.total_ad_credit
        expected = np.zeros(corpus.n_users)
        for i, p in enumerate(corpus.to_paths()):
            n_ads = int(corpus.ev_shown[corpus.ev_offsets[i]:corpus.ev_offsets[i + 1]].sum())
            expected[i] = sum(expected_credit(s1_model, p, j) for j in range(1, n_ads + 1))
        diff = realized - expected
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        assert abs(diff.mean()) < 3 * se
