"""Statistics tests: hand arithmetic, closed forms, high-precision oracle."""

import math

import numpy as np
import pytest

from mivhead import stats
from mivhead.stats import MethodSeries


def _series(values, method="m", ids=None):
    ids = ids or [f"task{i:04d}" for i in range(len(values))]
    return MethodSeries(method=method, config_hash="x", task_ids=ids,
                        accuracies=list(values))


def test_mean_ci95_hand_arithmetic():
    mean, hw = stats.mean_ci95([0.5, 0.7])
    assert mean == pytest.approx(0.6, abs=1e-12)
    # sd = 0.141421, halfwidth = 1.96 * sd / sqrt(2) = 0.19600
    assert hw == pytest.approx(0.19600, abs=1e-5)


def test_mean_ci95_equal_values_zero_halfwidth():
    mean, hw = stats.mean_ci95([0.3] * 10)
    assert mean == pytest.approx(0.3)
    assert hw == 0.0


def test_mean_ci95_scaling_under_duplication():
    vals = [0.2, 0.4, 0.6, 0.8]
    _, hw1 = stats.mean_ci95(vals)
    _, hw4 = stats.mean_ci95(vals * 4)
    # 4x duplication: 1/sqrt(n) halves the width; the n-1 denominator makes
    # the match approximate at small n
    assert hw4 == pytest.approx(hw1 / 2, rel=0.12)


def test_mean_ci95_requires_two():
    with pytest.raises(stats.StatsError):
        stats.mean_ci95([0.5])


def test_paired_ttest_identical_series():
    a = _series([0.5, 0.6, 0.7])
    res = stats.paired_ttest(a, a)
    assert res.t == 0.0
    assert res.p_two_sided == 1.0
    assert not res.significant_at_1pct


def test_paired_ttest_df2_closed_form():
    # d = (0.1, 0.2, 0.3): t = 3.4641, df = 2, p = 0.0742
    a = _series([0.4, 0.5, 0.6])
    b = _series([0.3, 0.3, 0.3])
    res = stats.paired_ttest(a, b)
    assert res.t == pytest.approx(3.4641, abs=1e-4)
    assert res.df == 2
    # closed form for df=2: F(t) = 0.5 * (1 + t / sqrt(2 + t^2))
    t = res.t
    p_closed = 2.0 * (1.0 - 0.5 * (1.0 + t / math.sqrt(2.0 + t * t)))
    assert res.p_two_sided == pytest.approx(p_closed, abs=1e-10)
    assert res.p_two_sided == pytest.approx(0.0742, abs=1e-4)
    assert not res.significant_at_1pct


def test_paired_ttest_constant_nonzero_difference():
    # dyadic values keep the per-task differences exactly constant
    a = _series([0.625, 0.75, 0.875])
    b = _series([0.5, 0.625, 0.75])
    res = stats.paired_ttest(a, b)
    assert res.p_two_sided == 0.0
    assert res.significant_at_1pct


def test_paired_ttest_antisymmetric():
    rng = np.random.default_rng(0)
    a = _series(rng.uniform(0.2, 0.9, size=20))
    b = _series(rng.uniform(0.2, 0.9, size=20))
    ab = stats.paired_ttest(a, b)
    ba = stats.paired_ttest(b, a)
    assert ab.t == pytest.approx(-ba.t, abs=1e-12)
    assert ab.p_two_sided == pytest.approx(ba.p_two_sided, abs=1e-12)


def test_paired_ttest_misaligned_ids():
    a = _series([0.5, 0.6], ids=["t0", "t1"])
    b = _series([0.5, 0.6], ids=["t0", "t2"])
    with pytest.raises(stats.StatsError, match="align"):
        stats.paired_ttest(a, b)


def test_t_tail_matches_high_precision_oracle():
    # mpmath-based reference for the two-sided tail, 1e-8 agreement over a
    # wide (t, df) grid
    from mpmath import mp, betainc

    mp.dps = 40
    for df in [1, 2, 3, 5, 10, 30, 80, 200]:
        for t in np.linspace(-10, 10, 41):
            if t == 0:
                continue
            x = df / (df + float(t) ** 2)
            ref = float(betainc(df / 2, 0.5, 0, x, regularized=True))
            got = stats.student_t_sf2(float(t), df)
            assert got == pytest.approx(ref, abs=1e-8), (t, df)


def test_t_cdf_symmetry():
    for df in (1, 4, 50):
        for t in (0.3, 1.7, 6.0):
            up = stats.student_t_cdf(t, df)
            lo = stats.student_t_cdf(-t, df)
            assert up + lo == pytest.approx(1.0, abs=1e-12)


def test_render_report_single_series_plain():
    text, payload = stats.render_report([_series([0.5, 0.7, 0.9])])
    assert "**" not in text
    assert payload["series"][0]["bold"] is False


def test_render_report_bolds_significant_winner():
    a = _series([0.8, 0.82, 0.84, 0.86], method="A")
    b = _series([0.5, 0.52, 0.54, 0.56], method="B")
    text, payload = stats.render_report([a, b], pairings=[("A", "B")])
    assert payload["pairings"][0]["winner"] == "A"
    a_row = [r for r in payload["series"] if r["method"] == "A"][0]
    assert a_row["bold"] is True
    assert "**" in text


def test_render_report_deterministic_bytes():
    a = _series([0.61, 0.66, 0.72, 0.8], method="A")
    b = _series([0.6, 0.64, 0.7, 0.78], method="B")
    one = stats.render_report([a, b], pairings=[("A", "B")])
    two = stats.render_report([a, b], pairings=[("A", "B")])
    assert one[0] == two[0]
    import json
    assert json.dumps(one[1], sort_keys=True) == json.dumps(two[1], sort_keys=True)
