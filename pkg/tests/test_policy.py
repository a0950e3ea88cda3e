import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lppgate.policy import (
    ConfusionCounts,
    CostModel,
    Decision,
    always_trust_cost,
    confusion,
    cost_ratio_sensitivity,
    decisions_at,
    expected_cost,
    policy_report,
    route,
    sweep_threshold,
    tau_grid,
)


class TestRoute:
    def test_boundary_inclusive(self):
        assert route(0.5, 0.5) is Decision.TRUST

    def test_below_escalates(self):
        assert route(0.49, 0.5) is Decision.ESCALATE

    def test_top_of_range(self):
        assert route(1.0, 0.70) is Decision.TRUST

    def test_score_validated(self):
        with pytest.raises(ValueError):
            route(1.2, 0.5)


class TestConfusion:
    def test_all_trust_all_correct(self):
        c = confusion([True] * 5, [1] * 5)
        assert (c.tp, c.fp, c.tn, c.fn) == (5, 0, 0, 0)

    def test_all_escalate_all_incorrect(self):
        c = confusion([False] * 4, [0] * 4)
        assert (c.tp, c.fp, c.tn, c.fn) == (0, 0, 4, 0)

    def test_enumeration(self):
        c = confusion([True, True, False, False], [1, 0, 0, 1])
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            confusion([True], [1, 0])


class TestExpectedCost:
    def test_direct_substitution(self):
        c = ConfusionCounts(tp=0, fp=2, tn=3, fn=1)
        m = CostModel(c_mis=100, c_rev=64)
        assert expected_cost(c, m) == 200 - 108 + 64 == 156

    def test_trust_all_reduces_to_always_trust(self):
        z = [1, 0, 0, 1, 1]
        m = CostModel(c_mis=100, c_rev=64)
        c = confusion([True] * 5, z)
        assert expected_cost(c, m) == always_trust_cost(z, m) == 200

    def test_escalate_all(self):
        z = [1, 0, 0, 1, 1]
        m = CostModel(c_mis=100, c_rev=64)
        c = confusion([False] * 5, z)
        assert expected_cost(c, m) == 64 * 5 - 100 * 2

    def test_always_trust_no_errors(self):
        assert always_trust_cost([1, 1, 1], CostModel()) == 0.0


class TestTauGrid:
    def test_default_has_71_points(self):
        grid = tau_grid()
        assert len(grid) == 71
        assert grid[0] == 0.35 and grid[-1] == 0.70
        assert grid[11] == 0.405


class TestSweep:
    def test_hand_swept_example(self):
        m = CostModel(c_mis=1.0, c_rev=0.64)
        result = sweep_threshold([0.4, 0.5, 0.6], [0, 1, 1], m)
        assert result.tau_star == 0.405
        assert result.expected_cost == pytest.approx(-0.36)
        assert result.escalations == 1

    def test_all_scores_equal_tie_rule(self):
        m = CostModel(c_mis=1.0, c_rev=0.64)
        result = sweep_threshold([0.5] * 4, [1, 1, 1, 1], m)
        # trusting everything is free; fewest escalations then lowest tau
        assert result.tau_star == 0.35
        assert result.expected_cost == 0.0
        assert result.escalations == 0

    def test_all_correct_lowest_grid_point(self):
        m = CostModel()
        result = sweep_threshold([0.2, 0.6, 0.9], [1, 1, 1], m)
        assert result.tau_star == 0.35

    @given(
        st.lists(st.floats(min_value=0, max_value=1), min_size=3, max_size=40),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_sweep_optimality_exhaustive(self, scores, seed):
        rng = np.random.default_rng(seed)
        z = rng.integers(0, 2, size=len(scores))
        m = CostModel(c_mis=3.0, c_rev=1.92)
        result = sweep_threshold(scores, z, m)
        for tau in tau_grid():
            c = confusion(decisions_at(scores, tau), z)
            assert result.expected_cost <= expected_cost(c, m) + 1e-12

    @given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=30))
    def test_escalation_monotonicity(self, scores):
        z = [1] * len(scores)
        grid = tau_grid()
        escalations = [confusion(decisions_at(scores, t), z).escalations for t in grid]
        assert all(a <= b for a, b in zip(escalations, escalations[1:]))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(size=200)
        z = rng.integers(0, 2, size=200)
        m = CostModel()
        a = sweep_threshold(scores, z, m)
        b = sweep_threshold(scores, z, m)
        assert a == b


class TestSensitivity:
    def test_linear_in_ratio(self):
        counts = ConfusionCounts(tp=0, fp=0, tn=1, fn=1)
        curve = dict(cost_ratio_sensitivity(counts, (0.4, 0.64, 0.9)))
        assert curve[0.4] == pytest.approx(-0.2)
        assert curve[0.64] == pytest.approx(0.28)
        assert curve[0.9] == pytest.approx(0.8)

    def test_constant_when_no_escalations(self):
        counts = ConfusionCounts(tp=5, fp=3, tn=0, fn=0)
        curve = cost_ratio_sensitivity(counts, (0.4, 0.64, 0.9))
        assert all(rel == 3 for _, rel in curve)

    def test_unit_ratio(self):
        counts = ConfusionCounts(tp=1, fp=2, tn=5, fn=3)
        [(_, rel)] = cost_ratio_sensitivity(counts, (1.0,))
        assert rel == counts.fp + counts.fn

    @given(
        st.integers(min_value=0, max_value=500),
        st.integers(min_value=0, max_value=500),
        st.integers(min_value=0, max_value=500),
    )
    def test_affine_slope_is_escalations(self, fp, tn, fn):
        counts = ConfusionCounts(tp=0, fp=fp, tn=tn, fn=fn)
        curve = cost_ratio_sensitivity(counts, (0.4, 0.5, 0.9))
        slope = (curve[2][1] - curve[0][1]) / (0.9 - 0.4)
        assert slope == pytest.approx(tn + fn, abs=1e-6)

    def test_consistency_with_main_cost(self):
        counts = ConfusionCounts(tp=10, fp=4, tn=7, fn=2)
        m = CostModel(c_mis=100, c_rev=64)
        [(_, rel)] = cost_ratio_sensitivity(counts, (m.ratio,))
        assert rel == pytest.approx(expected_cost(counts, m) / m.c_mis, abs=1e-9)


class TestPolicyReport:
    def test_shape(self):
        m = CostModel()
        result = sweep_threshold([0.2, 0.6, 0.9], [0, 1, 1], m)
        report = policy_report(result, [0, 1, 1], m)
        assert set(report) == {
            "tau_star",
            "expected_cost",
            "always_trust_cost",
            "counts",
            "escalations",
            "escalation_ratio",
            "cost_model",
            "sensitivity",
        }
        assert [s["r"] for s in report["sensitivity"]] == [0.4, 0.64, 0.9]
