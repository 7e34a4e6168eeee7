import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalseg import LearnerSpec, build_segment_index, estimate_cate_by_segment, fit_cate_function, test_segments
from causalseg.cate import (TABLE_HEADERS, CateTable, adjust_pvalues, format_table, normal_ci, one_sided_p,
                            plot_data_csv, table_to_csv)
from causalseg.exceptions import ConfigError, DegenerateError
from causalseg.learners import predict

from conftest import make_table


def test_zero_variance_segment():
    table = estimate_cate_by_segment(np.ones(3), build_segment_index([(0,)] * 3))
    e = table.estimates[0]
    assert (e.cate, e.se, e.ci_lower, e.ci_upper, e.flag) == (1.0, 0.0, 1.0, 1.0, "zero-variance")


@pytest.mark.parametrize("cate, se, ci, p", [
    (0.283, 0.089, (0.108, 0.459), 0.001),
    (-0.595, 0.063, (-0.719, -0.471), 1.000),
])
def test_table2_inference_arithmetic(cate, se, ci, p):
    lo, hi = normal_ci(cate, se)
    assert abs(lo - ci[0]) <= 0.002 and abs(hi - ci[1]) <= 0.002
    assert one_sided_p(cate, se) == pytest.approx(p, abs=0.001)


def test_first_table2_row_z_statistic():
    assert 0.283 / 0.089 == pytest.approx(3.18, abs=0.005)
    assert round(one_sided_p(0.283, 0.089), 3) == 0.001


def test_segment_estimates_match_grouping_oracle():
    rng = np.random.default_rng(0)
    D = rng.normal(size=10)
    keys = [(0,)] * 4 + [(1,)] * 6
    table = estimate_cate_by_segment(D, build_segment_index(keys))
    for e, part in zip(table.estimates, (D[:4], D[4:])):
        mean = sum(part) / len(part)
        sd = math.sqrt(sum((x - mean) ** 2 for x in part) / (len(part) - 1))
        assert e.cate == pytest.approx(mean, abs=1e-12)
        assert e.se == pytest.approx(sd / math.sqrt(len(part)), abs=1e-12)
        assert e.proportion == len(part) / 10


def test_rows_are_ordered_by_segment_key():
    with pytest.warns(UserWarning):
        table = estimate_cate_by_segment(np.arange(4.0), build_segment_index([(2,), (1,), (2,), (0,)]))
    assert table.segments == ((0,), (1,), (2,))


def test_singleton_segment_is_flagged_and_untested():
    idx = build_segment_index([(0,), (0,), (1,)])
    with pytest.warns(UserWarning, match="single unit"):
        table = estimate_cate_by_segment(np.array([1.0, 2.0, 5.0]), idx)
    single = table.row((1,))
    assert single.flag == "singleton" and single.se == math.inf
    tested = test_segments(table, 0.0)
    assert math.isnan(tested.row((1,)).p_adjusted) and not tested.row((1,)).treat
    # Only one testable segment, so the correction has m = 1.
    assert tested.row((0,)).p_adjusted == tested.row((0,)).p_raw


def test_all_singletons_cannot_be_tested():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = estimate_cate_by_segment(np.array([1.0, 2.0]), build_segment_index([(0,), (1,)]))
    with pytest.raises(DegenerateError):
        test_segments(table)


def test_one_sided_p_values_on_table2_rows(table2):
    tested = test_segments(table2, theta=0.0, correction="none")
    assert tested.row((1, 0)).p_raw == pytest.approx(0.001, abs=0.0005)
    hold = tested.row((2, 0))
    assert hold.p_raw == pytest.approx(1.0, abs=0.001) and not hold.treat


def test_bonferroni_with_one_segment():
    table = make_table([((1,), 1.0, 0.1, 0.08)], columns=("v",))
    tested = test_segments(table, correction="bonferroni")
    assert tested.estimates[0].p_adjusted == tested.estimates[0].p_raw


def test_holm_known_values():
    adj = adjust_pvalues([0.01, 0.04, 0.03, 0.005], "holm")
    np.testing.assert_allclose(adj, [0.03, 0.06, 0.06, 0.02])
    np.testing.assert_allclose(adjust_pvalues([0.01, 0.04], "bonferroni"), [0.02, 0.08])
    with pytest.raises(ConfigError):
        adjust_pvalues([0.1], "fdr")


def test_degenerate_tests():
    assert one_sided_p(1.0, 0.0) == 0.0
    assert one_sided_p(0.0, 0.0) == 1.0
    assert one_sided_p(1.0, 0.5, theta=math.inf) == 1.0


def test_cate_function_on_discrete_v_reproduces_table():
    rng = np.random.default_rng(1)
    keys = [(int(k),) for k in rng.integers(0, 4, 200)]
    D = rng.normal(size=200) + np.array([k[0] for k in keys])
    table = estimate_cate_by_segment(D, build_segment_index(keys))
    model = fit_cate_function(D, np.array(keys, dtype=float), [LearnerSpec("stratified-mean")])
    pred = predict(model, np.array(table.segments, dtype=float))
    np.testing.assert_array_equal(pred, [e.cate for e in table.estimates])


def test_constant_pseudo_outcome_gives_constant_function():
    model = fit_cate_function(np.full(30, 2.5), np.arange(30.0), [LearnerSpec("linear")])
    np.testing.assert_allclose(predict(model, np.array([-5.0, 100.0])), 2.5, atol=1e-9)


def test_linear_cate_function_matches_least_squares():
    rng = np.random.default_rng(2)
    v = rng.integers(0, 5, 300).astype(float)
    D = 0.7 * v + rng.normal(size=300)
    model = fit_cate_function(D, v, [LearnerSpec("mean"), LearnerSpec("linear", ridge=0.0)])
    slope = np.polyfit(v, D, 1)[0]
    assert model.params["coef"][0] == pytest.approx(slope, abs=1e-8)


def test_csv_and_text_outputs(table2):
    tested = test_segments(table2)
    lines = table_to_csv(tested).splitlines()
    assert lines[0].split(",") == ["num_devices", "is_p2plus", *TABLE_HEADERS]
    assert len(lines) == 11
    first = lines[1].split(",")
    assert first[:4] == ["1", "0", "0.0392", "0.283"]
    assert first[-1] == "Yes"
    plot = plot_data_csv(tested).splitlines()
    assert plot[0] == "label,cate,ci_lower,ci_upper,decision"
    assert plot[1].startswith('"num_devices=1, is_p2plus=0",0.283,')
    text = format_table(tested)
    assert "Segment Proportion" in text and "0.283" in text


def test_table_json_round_trip(table2):
    tested = test_segments(table2)
    assert CateTable.from_dict(tested.to_dict()) == tested


def test_input_validation():
    idx = build_segment_index([(0,), (1,)])
    with pytest.raises(ConfigError):
        estimate_cate_by_segment(np.ones(3), idx)
    with pytest.raises(ConfigError):
        estimate_cate_by_segment(np.ones(2), idx, alpha=1.5)


_segments = st.lists(st.integers(0, 5), min_size=2, max_size=120)


@settings(max_examples=80, deadline=None)
@given(labels=_segments, seed=st.integers(0, 10_000))
def test_weighted_reconstruction_of_overall_mean(labels, seed):
    D = np.random.default_rng(seed).normal(scale=3, size=len(labels))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = estimate_cate_by_segment(D, build_segment_index([(x,) for x in labels]))
    total = math.fsum(e.proportion * e.cate for e in table.estimates)
    assert abs(total - D.mean()) <= 1e-10
    for e in table.estimates:
        assert e.ci_lower <= e.cate <= e.ci_upper


@settings(max_examples=80, deadline=None)
@given(cates=st.lists(st.floats(-5, 5), min_size=1, max_size=12), se=st.floats(0.01, 2),
       thetas=st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_raising_theta_never_adds_treatment(cates, se, thetas):
    table = make_table([((i,), 1 / len(cates), c, se) for i, c in enumerate(cates)], columns=("v",))
    lo, hi = sorted(thetas)
    low = {e.segment for e in test_segments(table, lo).estimates if e.treat}
    high = {e.segment for e in test_segments(table, hi).estimates if e.treat}
    assert high <= low


@settings(max_examples=100, deadline=None)
@given(p=st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_holm_between_raw_and_bonferroni(p):
    holm, bonf = adjust_pvalues(p, "holm"), adjust_pvalues(p, "bonferroni")
    assert np.all(holm <= bonf + 1e-15)
    assert np.all(holm >= np.asarray(p) - 1e-15)
    assert np.all(bonf >= np.asarray(p) - 1e-15)


def test_small_segments_warn_but_keep_their_estimates():
    idx = build_segment_index([(0,)] * 5 + [(1,)] * 40)
    D = np.arange(45, dtype=float)
    with pytest.warns(UserWarning, match=r"fewer than 30 units.*\(0,\)"):
        table = estimate_cate_by_segment(D, idx)
    assert table.row((0,)).cate == 2.0 and math.isfinite(table.row((0,)).se)
