import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcpretrain import connectome as fc
from fcpretrain.synth import oracle_pearson


def _two_pass_zscore(row):
    n = len(row)
    m = sum(row) / n
    var = sum((v - m) ** 2 for v in row) / n
    return [(v - m) / var ** 0.5 for v in row]


def test_constant_row_normalizes_to_zero_with_flag():
    z, flags = fc.normalize_timeseries(np.array([[1.0, 1, 1, 1], [1, 2, 3, 4]]), return_flags=True)
    assert z[0].tolist() == [0.0, 0.0, 0.0, 0.0]
    assert flags.tolist() == [True, False]


def test_too_few_timepoints_rejected():
    with pytest.raises(fc.ParameterError):
        fc.normalize_timeseries(np.array([[0.0, 2.0]]))


def test_normalize_matches_two_pass_oracle():
    z = fc.normalize_timeseries(np.array([[1.0, 2, 3, 4, 5]]))[0]
    np.testing.assert_allclose(z, _two_pass_zscore([1.0, 2, 3, 4, 5]), rtol=0, atol=1e-15)
    assert abs(z.mean()) < 1e-15
    assert abs((z * z).mean() - 1.0) < 1e-15


def test_collinear_and_anticollinear_rows():
    m = fc.pearson_fc(np.array([[1.0, 2, 3, 4], [2, 4, 6, 8], [4, 3, 2, 1]])).matrix
    assert m[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert m[0, 2] == pytest.approx(-1.0, abs=1e-15)


def test_pearson_matches_summation_oracle_on_3x5():
    data = np.random.default_rng(11).normal(size=(3, 5))
    np.testing.assert_allclose(fc.pearson_fc(data).matrix, oracle_pearson(data), rtol=0, atol=1e-12)


def test_zero_variance_row_gets_identity_fallback_and_warning():
    data = np.array([[1.0, 2, 3, 5], [7.0, 7, 7, 7], [0.5, -1, 2, 0]])
    with pytest.warns(fc.ZeroVarianceWarning):
        m = fc.pearson_fc(data, "s09").matrix
    assert m[1, 1] == 1.0
    assert np.all(np.delete(m[1], 1) == 0.0)


def test_drop_plan_rate_zero_keeps_everything():
    plan = fc.make_drop_plan(12, 0.0, seed=5)
    assert plan.kept_columns == tuple(range(12))
    assert plan.dropped_columns == ()


def test_drop_plan_is_deterministic():
    assert fc.make_drop_plan(10, 0.2, 7) == fc.make_drop_plan(10, 0.2, 7)


def test_drop_count_rounds_half_to_even():
    # 0.25 * 10 = 2.5 -> 2 ; 0.35 * 10 = 3.5 -> 4
    assert len(fc.make_drop_plan(10, 0.25, 1).dropped_columns) == 2
    assert len(fc.make_drop_plan(10, 0.35, 1).dropped_columns) == 4


def test_drop_plan_rejects_too_few_survivors():
    with pytest.raises(fc.ParameterError):
        fc.make_drop_plan(4, 0.5, 0)
    with pytest.raises(fc.ParameterError):
        fc.make_drop_plan(10, 1.0, 0)


def test_drop_plan_columns_uniform_over_10000_plans():
    counts = np.zeros(10)
    for seed in range(10_000):
        counts[list(fc.make_drop_plan(10, 0.2, seed).dropped_columns)] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.2) <= 0.02), freq


def test_plans_with_different_seeds_differ():
    plans = {fc.make_drop_plan(50, 0.15, seed).kept_columns for seed in range(100)}
    assert len(plans) == 100


def test_pfc_at_zero_drop_is_bitwise_fc():
    data = np.random.default_rng(4).normal(size=(6, 30))
    a = fc.pfc_augment(data, fc.make_drop_plan(30, 0.0, 1)).matrix
    assert np.array_equal(a, fc.pearson_fc(data).matrix)


def test_pfc_on_kept_columns_matches_oracle():
    data = np.random.default_rng(8).normal(size=(2, 4))
    plan = fc.DropPlan(0.25, (0, 2, 3), 0, 4)
    got = fc.pfc_augment(data, plan)
    np.testing.assert_allclose(got.matrix, oracle_pearson(data[:, [0, 2, 3]]), rtol=0, atol=1e-12)
    assert got.dropped_timepoints == (1,)


def test_default_drop_rate():
    assert fc.DEFAULT_DROP_RATE == 0.15


def test_plan_for_other_length_rejected():
    with pytest.raises(fc.ParameterError):
        fc.pfc_augment(np.zeros((2, 9)) + np.arange(9), fc.make_drop_plan(10, 0.2, 0))


def test_view_seeds_separate_subjects_and_views():
    seeds = {fc.view_seed(3, s, v) for s in ("a", "b") for v in (0, 1)}
    assert len(seeds) == 4
    assert fc.view_seed(3, "a", 0) == fc.view_seed(3, "a", 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(3, 40), st.integers(0, 2**32 - 1))
def test_connectome_invariants(v, t, seed):
    data = np.random.default_rng(seed).normal(size=(v, t))
    m = fc.pearson_fc(data).matrix
    assert np.max(np.abs(m - m.T)) <= 1e-9
    assert np.all(np.diag(m) == 1.0)
    assert np.all((m >= -1.0) & (m <= 1.0))
    assert np.linalg.eigvalsh(m).min() >= -1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_fc_invariant_under_positive_affine_rows(seed, a, b):
    data = np.random.default_rng(seed).normal(size=(4, 25))
    transformed = a * data + b
    np.testing.assert_allclose(fc.pearson_fc(transformed).matrix, fc.pearson_fc(data).matrix, rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 60), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_drop_plan_invariants(t, rate, seed):
    plan = fc.make_drop_plan(t, rate, seed)
    assert list(plan.kept_columns) == sorted(set(plan.kept_columns))
    assert len(plan.dropped_columns) == round(rate * t)
    assert set(plan.kept_columns) | set(plan.dropped_columns) == set(range(t))
