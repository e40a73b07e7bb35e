import numpy as np
import pytest

from conftest import random_dataset
from mme.errors import (EmptyPool, EmptyTrain, LengthMismatch, NotNormalized,
                        TooFewSamples)
from mme.evaluate import (MetricsRow, aging_curve, compute_metrics,
                          js_divergence, maintain_to_threshold,
                          maintain_with_budget, resolve_budget,
                          stability_report, temporal_split, trace_period,
                          uncertainty_select, validate_label_log)
from mme.experiment import ExperimentConfig, run_pipeline
from mme.nnet import EncoderConfig, ModelState, TrainConfig, init_params
from mme.sequence import ApiCallEvent, ApiTrace


def stamped_trace(trace_id, timestamp, y=0, family=0):
    return ApiTrace(trace_id=trace_id, calls=(ApiCallEvent("Foo"),), y=y,
                    family=family, timestamp=timestamp)


@pytest.fixture(scope="module")
def small_bundle():
    """A miniature end-to-end pipeline reused by the maintenance tests."""
    cfg = ExperimentConfig(seed=3, families=4, months=8, per_family_month=3,
                           benign_per_month=12, transe_epochs=60, epochs=12)
    return run_pipeline(cfg)


# --- temporal split -----------------------------------------------------------

def test_temporal_split_yearly_paper_shape():
    traces = [stamped_trace(f"a{i}", f"2017-{m:02d}") for i, m in enumerate((1, 6, 12))]
    traces += [stamped_trace(f"b{y}{m}", f"{y}-{m:02d}", y=1, family=1)
               for y in (2018, 2019, 2020, 2021) for m in (2, 7)]
    split = temporal_split(traces, "2017", bucket="yearly")
    assert len(split.train) == 3
    assert list(split.test_buckets) == ["2018", "2019", "2020", "2021"]


def test_temporal_split_train_never_in_test():
    traces = [stamped_trace(f"t{i}", "2020-01") for i in range(3)]
    traces += [stamped_trace(f"u{i}", "2020-02") for i in range(3)]
    split = temporal_split(traces, "2020-01", bucket="monthly")
    test_ids = {tid for ids in split.test_buckets.values() for tid in ids}
    assert not (set(split.train) & test_ids)


def test_temporal_split_monthly_bucket_count():
    traces = []
    for i in range(48):
        year, month = 2018 + i // 12, i % 12 + 1
        traces.append(stamped_trace(f"m{i}", f"{year}-{month:02d}"))
    split = temporal_split(traces, "2018-01", bucket="monthly")
    assert len(split.test_buckets) <= 48
    assert len(split.test_buckets) == 47
    split.validate()


def test_temporal_split_empty_train():
    with pytest.raises(EmptyTrain):
        temporal_split([stamped_trace("x", "2020-05")], "2020-01", "monthly")


def test_trace_period_granularities():
    assert trace_period("2020-07", "yearly") == "2020"
    assert trace_period("2020-07", "monthly") == "2020-07"
    with pytest.raises(ValueError):
        trace_period("2020-07", "weekly")


# --- metrics --------------------------------------------------------------------

def test_metrics_all_correct():
    pairs = [(1, 1)] * 5 + [(0, 0)] * 5
    row = compute_metrics(pairs)
    assert (row.fpr, row.fnr, row.f1) == (0.0, 0.0, 1.0)


def test_metrics_formula():
    pairs = [(1, 1)] * 9 + [(0, 1)] + [(1, 0)] + [(0, 0)] * 9
    row = compute_metrics(pairs)
    assert row.tp == 9 and row.fp == 1 and row.fn == 1 and row.tn == 9
    assert row.f1 == pytest.approx(0.9)
    assert row.fpr == pytest.approx(0.1)
    assert row.fnr == pytest.approx(0.1)


def test_metrics_zero_over_zero_rule():
    row = compute_metrics([(0, 0), (0, 0)])
    assert row.fnr == 0.0 and row.f1 == 0.0 and row.fpr == 0.0


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(0)
    pairs = [(int(rng.integers(2)), int(rng.integers(2))) for _ in range(40)]
    base = compute_metrics(pairs)
    for _ in range(5):
        rng.shuffle(pairs)
        assert compute_metrics(pairs) == base


# --- selection -------------------------------------------------------------------

def test_uncertainty_select_closest_to_half():
    scored = [("a", 0.9), ("b", 0.55), ("c", 0.1)]
    assert uncertainty_select(scored, 1) == ["b"]


def test_uncertainty_select_whole_pool():
    scored = [("a", 0.9), ("b", 0.55)]
    assert sorted(uncertainty_select(scored, 10)) == ["a", "b"]


def test_uncertainty_select_tie_by_id():
    scored = [("z", 0.6), ("a", 0.4)]
    assert uncertainty_select(scored, 1) == ["a"]


def test_uncertainty_select_empty_pool():
    with pytest.raises(EmptyPool):
        uncertainty_select([], 1)


def test_resolve_budget():
    assert resolve_budget(50, ratio=0.10) == 5
    assert resolve_budget(50, count=20) == 20
    assert resolve_budget(10, count=20) == 10
    with pytest.raises(ValueError):
        resolve_budget(10)
    with pytest.raises(ValueError):
        resolve_budget(10, count=1, ratio=0.5)


# --- js divergence ----------------------------------------------------------------

def test_js_identical_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert js_divergence(p, p) == 0.0


def test_js_disjoint_masses_is_one():
    assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-9)


def test_js_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        a, b = js_divergence(p, q), js_divergence(q, p)
        assert a == pytest.approx(b, abs=1e-12)
        assert 0.0 <= a <= 1.0


def test_js_zero_iff_equal():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(4))
    q = rng.dirichlet(np.ones(4))
    if not np.allclose(p, q, atol=1e-9):
        assert js_divergence(p, q) > 0.0


def test_js_validation():
    with pytest.raises(LengthMismatch):
        js_divergence([0.5, 0.5], [1.0])
    with pytest.raises(NotNormalized):
        js_divergence([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(NotNormalized):
        js_divergence([-0.1, 1.1], [0.5, 0.5])


# --- aging curve and maintenance ----------------------------------------------------

def test_aging_curve_rows_ordered(small_bundle):
    rows = small_bundle.curve_regular
    periods = [r.period for r in rows]
    assert periods == sorted(periods)
    assert len(rows) == len(small_bundle.split.test_buckets)


def test_aging_curve_deterministic(small_bundle):
    again = aging_curve(small_bundle.model_regular, small_bundle.split,
                        small_bundle.dataset_regular)
    assert again == small_bundle.curve_regular


def test_maintain_threshold_zero_labels_when_passing(small_bundle):
    result = maintain_to_threshold(small_bundle.model_mme, small_bundle.split,
                                   small_bundle.dataset_mme, threshold=0.05)
    assert result.total_labels() == 0
    assert [r.period for r in result.rows] == list(small_bundle.split.test_buckets)


def test_maintain_threshold_labels_bounded_by_bucket(small_bundle):
    result = maintain_to_threshold(small_bundle.model_regular, small_bundle.split,
                                   small_bundle.dataset_regular, threshold=0.95)
    for period, used in result.labels_used.items():
        assert used <= len(small_bundle.split.test_buckets[period])
    assert validate_label_log(result.label_log)


def test_maintain_budget_zero_degenerates_to_aging(small_bundle):
    result = maintain_with_budget(small_bundle.model_regular, small_bundle.split,
                                  small_bundle.dataset_regular, count=0)
    assert result.rows == small_bundle.curve_regular
    assert result.total_labels() == 0


def test_maintain_budget_average_is_mean_of_rows(small_bundle):
    result = maintain_with_budget(small_bundle.model_regular, small_bundle.split,
                                  small_bundle.dataset_regular, ratio=0.05)
    avg = result.average()
    assert avg["f1"] == pytest.approx(np.mean([r.f1 for r in result.rows]))
    assert avg["fnr"] == pytest.approx(np.mean([r.fnr for r in result.rows]))
    assert validate_label_log(result.label_log)


def test_maintain_budget_threshold_validation(small_bundle):
    with pytest.raises(ValueError):
        maintain_to_threshold(small_bundle.model_mme, small_bundle.split,
                              small_bundle.dataset_mme, threshold=1.5)
    with pytest.raises(ValueError):
        maintain_with_budget(small_bundle.model_mme, small_bundle.split,
                             small_bundle.dataset_mme)


# --- stability -------------------------------------------------------------------

def test_stability_identical_traces_zero_scores():
    rng = np.random.default_rng(3)
    width, max_len = 10, 6
    enc = EncoderConfig(kind="meanpool", latent_dim=8)
    params = init_params(enc, width, 5, rng)
    model = ModelState(mode="mme", encoder_cfg=enc, train_cfg=TrainConfig(),
                       params=params, input_dim=width, max_len=max_len,
                       lam=1.0, margin=1.0)
    traces = [ApiTrace(trace_id=f"s{i:02d}", calls=(ApiCallEvent("Foo"),),
                       y=1, family=1, timestamp=f"2020-{i % 12 + 1:02d}")
              for i in range(12)]
    X = np.tile(rng.normal(size=(1, max_len, width)), (12, 1, 1))
    from mme.sequence import EmbeddedDataset
    ds = EmbeddedDataset(ids=[t.trace_id for t in traces], X=X,
                         lengths=np.full(12, max_len), y=np.ones(12, dtype=int),
                         family=np.ones(12, dtype=int))
    report = stability_report(model, traces, ds, n_groups=10)
    assert report.per_family[1] == [0.0] * 9


def test_stability_scores_in_range(small_bundle):
    report = stability_report(small_bundle.model_mme,
                              small_bundle.corpus.traces,
                              small_bundle.dataset_mme)
    for fam, scores in report.per_family.items():
        assert len(scores) == 9
        for s in scores:
            assert 0.0 <= s <= 1.0


def test_stability_too_few_samples(small_bundle):
    traces = [t for t in small_bundle.corpus.traces if t.y == 1][:5]
    with pytest.raises(TooFewSamples):
        stability_report(small_bundle.model_mme, traces,
                         small_bundle.dataset_mme, n_groups=10)
