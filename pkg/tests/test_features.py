import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lppgate.features import (
    ALL_FAMILIES,
    FeatureFamily,
    LabelDistribution,
    NoLabelMass,
    SequenceStats,
    TopKDistribution,
    assemble_feature_vector,
    catalog_names,
    collapse_to_labels,
    compute_attribution_features,
    compute_filtered_features,
    compute_logodds_features,
    compute_sequence_features,
    compute_topk_features,
    compute_verbalized_features,
    renormalize_topk,
    EmptyCandidates,
)
from lppgate.schema import (
    ConfidenceBand,
    OutcomeLabel,
    Span,
    StructuredResponse,
    TokenCandidate,
    TokenRecord,
)
from tests.conftest import make_outcome_record, make_trace

DYADIC = (0.5, 0.25, 0.125, 0.0625, 0.0625)


class TestRenormalizeTopk:
    def test_equal_logprobs_uniform(self):
        dist = renormalize_topk([-3.2] * 5)
        assert dist.probs == pytest.approx([0.2] * 5, abs=1e-12)

    def test_already_normalized_dyadic(self):
        dist = renormalize_topk([math.log(p) for p in DYADIC])
        assert dist.probs == pytest.approx(DYADIC, abs=1e-12)

    def test_near_delta(self):
        dist = renormalize_topk([0.0, -50.0, -50.0, -50.0, -50.0])
        assert dist.probs[0] == pytest.approx(1.0, abs=1e-9)

    def test_empty_raises(self):
        with pytest.raises(EmptyCandidates):
            renormalize_topk([])

    @given(
        st.lists(st.floats(min_value=-30, max_value=0), min_size=1, max_size=20),
        st.floats(min_value=-100, max_value=100),
    )
    def test_shift_invariance(self, logprobs, c):
        base = renormalize_topk(logprobs)
        shifted = renormalize_topk([lp + c for lp in logprobs])
        assert np.allclose(base.probs, shifted.probs, atol=1e-9)


class TestTopkFeatures:
    def test_uniform_five(self):
        f = compute_topk_features(TopKDistribution((0.2,) * 5, 5))
        assert f["entropy"] == pytest.approx(math.log2(5), abs=1e-12)
        assert f["entropy_norm"] == pytest.approx(1.0, abs=1e-12)
        assert f["effective_choices"] == pytest.approx(5.0, abs=1e-9)
        assert f["msp"] == 0.2
        assert f["margin"] == 0.0
        assert f["top1_top2_ratio"] == pytest.approx(1.0)

    def test_dyadic_exact(self):
        f = compute_topk_features(TopKDistribution(DYADIC, 5))
        assert f["entropy"] == 1.875
        assert f["effective_choices"] == 2.0**1.875
        assert f["msp"] == 0.5
        assert f["margin"] == 0.25
        assert f["margin_norm"] == pytest.approx(0.5)
        assert f["top1_top2_ratio"] == pytest.approx(2.0)

    def test_delta(self):
        f = compute_topk_features(TopKDistribution((1.0, 0.0, 0.0, 0.0, 0.0), 5))
        assert f["entropy"] == 0.0
        assert f["effective_choices"] == 1.0
        assert f["confidence"] == 1.0
        assert f["msp"] == 1.0
        assert f["margin"] == 1.0

    def test_single_candidate_entropy_norm_defined(self):
        f = compute_topk_features(TopKDistribution((1.0,), 1))
        assert f["entropy_norm"] == 0.0
        assert f["confidence"] == 1.0

    @given(st.lists(st.floats(min_value=-20, max_value=0), min_size=2, max_size=5))
    def test_bounds(self, logprobs):
        dist = renormalize_topk(logprobs)
        f = compute_topk_features(dist)
        k = dist.k
        assert -1e-12 <= f["entropy"] <= math.log2(k) + 1e-9
        assert 1.0 - 1e-9 <= f["effective_choices"] <= k + 1e-9
        assert 1.0 / k - 1e-9 <= f["msp"] <= 1.0 + 1e-12
        assert -1e-12 <= f["margin"] <= 1.0
        assert -1e-12 <= f["margin_norm"] <= 1.0 + 1e-12
        assert f["top1_top2_ratio"] >= 1.0 - 1e-9

    @given(st.lists(st.floats(min_value=-20, max_value=0), min_size=1, max_size=5))
    def test_consistency_identities(self, logprobs):
        f = compute_topk_features(renormalize_topk(logprobs))
        assert f["confidence"] == 1.0 - f["entropy_norm"]
        assert f["effective_choices"] == 2.0 ** f["entropy"]


COLLAPSE_EXAMPLE = {
    "0": math.log(0.4),
    " 0": math.log(0.2),
    "1": math.log(0.3),
    "2": math.log(0.05),
    "x": math.log(0.05),
}


def _candidates(mapping):
    return [TokenCandidate(s, lp) for s, lp in mapping.items()]


class TestCollapseToLabels:
    def test_hand_summed_masses(self):
        ldist = collapse_to_labels(_candidates(COLLAPSE_EXAMPLE))
        assert ldist.probs[OutcomeLabel.NO] == pytest.approx(12 / 19, abs=1e-12)
        assert ldist.probs[OutcomeLabel.YES] == pytest.approx(6 / 19, abs=1e-12)
        assert ldist.probs[OutcomeLabel.INCONCLUSIVE_EVIDENCE] == pytest.approx(1 / 19, abs=1e-12)
        assert ldist.probs[OutcomeLabel.INCONCLUSIVE_DEFINITION] == 0.0

    def test_already_normalized(self):
        ldist = collapse_to_labels(_candidates({"0": math.log(0.5), "1": math.log(0.5)}))
        assert ldist.probs[OutcomeLabel.NO] == pytest.approx(0.5)
        assert ldist.probs[OutcomeLabel.YES] == pytest.approx(0.5)
        assert ldist.probs[OutcomeLabel.INCONCLUSIVE_EVIDENCE] == 0.0

    def test_no_label_mass(self):
        with pytest.raises(NoLabelMass):
            collapse_to_labels(_candidates({"foo": 0.0}))

    def test_word_forms_count(self):
        ldist = collapse_to_labels(_candidates({"yes": math.log(0.6), "NO": math.log(0.4)}))
        assert ldist.probs[OutcomeLabel.YES] == pytest.approx(0.6)

    @given(st.integers(min_value=1, max_value=99))
    def test_surface_split_invariance(self, percent):
        frac = percent / 100.0
        base = {"0": math.log(0.6), "1": math.log(0.3), "2": math.log(0.1)}
        split = {
            "0": math.log(0.6 * frac),
            ' "0"': math.log(0.6 * (1 - frac)),
            "1": math.log(0.3),
            "2": math.log(0.1),
        }
        a = collapse_to_labels(_candidates(base))
        b = collapse_to_labels(_candidates(split))
        for label in a.support:
            assert a.probs[label] == pytest.approx(b.probs[label], abs=1e-9)
        fa = compute_filtered_features(a)
        fb = compute_filtered_features(b)
        for name in fa:
            assert fa[name] == pytest.approx(fb[name], abs=1e-9)


class TestFilteredFeatures:
    def test_collapse_example_metrics(self):
        ldist = collapse_to_labels(_candidates(COLLAPSE_EXAMPLE))
        f = compute_filtered_features(ldist)
        assert set(f) == {
            "entropy",
            "entropy_norm",
            "effective_choices",
            "confidence",
            "margin",
            "margin_norm",
            "top1_top2_ratio",
        }
        assert f["margin"] == pytest.approx(6 / 19, abs=1e-12)
        assert f["top1_top2_ratio"] == pytest.approx(2.0, abs=1e-9)

    def test_uniform_four_labels(self):
        ldist = LabelDistribution(
            {label: 0.25 for label in OutcomeLabel}, tuple(OutcomeLabel)
        )
        f = compute_filtered_features(ldist)
        assert f["entropy"] == pytest.approx(2.0, abs=1e-12)
        assert f["entropy_norm"] == pytest.approx(1.0, abs=1e-12)
        assert f["effective_choices"] == pytest.approx(4.0, abs=1e-9)

    def test_delta_distribution(self):
        probs = {label: 0.0 for label in OutcomeLabel}
        probs[OutcomeLabel.YES] = 1.0
        f = compute_filtered_features(LabelDistribution(probs, tuple(OutcomeLabel)))
        assert f["entropy"] == 0.0
        assert f["confidence"] == 1.0


class TestLogOddsFeatures:
    def test_hand_arithmetic(self):
        cands = [TokenCandidate("1", -0.1), TokenCandidate("0", -2.1)]
        ldist = collapse_to_labels(cands)
        f = compute_logodds_features(cands, ldist)
        assert f["margin"] == pytest.approx(-2.0, abs=1e-12)
        assert f["margin_norm"] == pytest.approx(-2.0 / -2.1, abs=1e-6)
        assert f["margin_valid"] == 1.0

    def test_tie(self):
        cands = [TokenCandidate("1", -0.7), TokenCandidate("0", -0.7)]
        f = compute_logodds_features(cands, collapse_to_labels(cands))
        assert f["margin"] == 0.0
        assert f["margin_norm"] == pytest.approx(0.0)

    def test_single_candidate_flagged_invalid(self):
        cands = [TokenCandidate("1", -0.05)]
        f = compute_logodds_features(cands, collapse_to_labels(cands))
        assert f["margin"] == 0.0
        assert f["margin_norm"] == 0.0
        assert f["margin_valid"] == 0.0
        assert f["filtered_margin_valid"] == 0.0

    def test_filtered_uses_pre_normalization_masses(self):
        # one label split across two surfaces: filtered margin uses summed mass
        cands = [
            TokenCandidate("0", math.log(0.3)),
            TokenCandidate(" 0", math.log(0.3)),
            TokenCandidate("1", math.log(0.3)),
        ]
        f = compute_logodds_features(cands, collapse_to_labels(cands))
        assert f["filtered_margin"] == pytest.approx(math.log(0.3) - math.log(0.6), abs=1e-12)
        assert f["filtered_margin_valid"] == 1.0


def _reasoning_record(p_chosen, n_candidates=1):
    # n_candidates equally likely alternatives fix the per-token entropy at
    # log2(n_candidates); the chosen surface matches a candidate so nothing
    # extra is appended
    cands = [TokenCandidate(f" c{j}", math.log(1.0 / n_candidates)) for j in range(n_candidates)]
    chosen = TokenCandidate(" c0", math.log(p_chosen))
    return TokenRecord(chosen=chosen, candidates=cands, span=Span.REASONING)


class TestSequenceFeatures:
    def test_uniform_halves(self):
        records = [_reasoning_record(0.5) for _ in range(4)]
        stats = compute_sequence_features(records)
        assert stats.nll == pytest.approx(4 * math.log(2), abs=1e-12)
        assert stats.perplexity == pytest.approx(2.0, abs=1e-12)
        assert not stats.absent

    def test_entropy_quantiles_exact_ranks(self):
        # entropies 0, 1, 2 from 1, 2, 4 equally likely candidates
        records = [
            _reasoning_record(0.5, n_candidates=1),
            _reasoning_record(0.5, n_candidates=2),
            _reasoning_record(0.5, n_candidates=4),
        ]
        stats = compute_sequence_features(records)
        assert stats.entropy_quantiles == pytest.approx((0.0, 0.5, 1.0, 1.5, 2.0), abs=1e-9)
        assert stats.mean_token_entropy_bits == pytest.approx(1.0, abs=1e-9)

    def test_interpolated_quantile(self):
        records = [
            _reasoning_record(0.5, n_candidates=1),
            _reasoning_record(0.5, n_candidates=2),
        ]
        stats = compute_sequence_features(records)
        assert stats.entropy_quantiles[1] == pytest.approx(0.25, abs=1e-12)

    def test_prob_quantiles_exact(self):
        records = [_reasoning_record(p) for p in (0.1, 0.2, 0.3, 0.4, 0.5)]
        stats = compute_sequence_features(records)
        assert stats.prob_quantiles == pytest.approx((0.1, 0.2, 0.3, 0.4, 0.5), abs=1e-9)

    def test_empty_span(self):
        stats = compute_sequence_features([])
        assert stats == SequenceStats(0.0, 1.0, 0.0, (0.0,) * 5, (0.0,) * 5, absent=True)

    @given(st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=1, max_size=30))
    def test_perplexity_at_least_one(self, probs):
        stats = compute_sequence_features([_reasoning_record(p) for p in probs])
        assert stats.perplexity >= 1.0 - 1e-12
        assert stats.nll >= -1e-12


class TestVerbalizedFeatures:
    def test_direct_mapping(self):
        s = StructuredResponse(OutcomeLabel.YES, (), 85, ConfidenceBand.H)
        f = compute_verbalized_features(s)
        assert f["confidence"] == 0.85
        assert f["confidence_missing"] == 0.0
        assert [f[f"band_{b}"] for b in ("vl", "l", "m", "h", "vh")] == [0, 0, 0, 1, 0]

    def test_band_absent_all_zero(self):
        s = StructuredResponse(OutcomeLabel.YES, (), 85, None)
        f = compute_verbalized_features(s)
        assert all(f[f"band_{b}"] == 0.0 for b in ("vl", "l", "m", "h", "vh"))

    def test_missing_p_correct_imputed(self):
        s = StructuredResponse(OutcomeLabel.YES, (), None, ConfidenceBand.M)
        f = compute_verbalized_features(s)
        assert f["confidence"] == 0.5
        assert f["confidence_missing"] == 1.0


class TestAttributionFeatures:
    @pytest.mark.parametrize(
        "outcome,expected",
        [
            (OutcomeLabel.YES, (0, 0, 0)),
            (OutcomeLabel.NO, (0, 0, 0)),
            (OutcomeLabel.INCONCLUSIVE_EVIDENCE, (1, 0, 1)),
            (OutcomeLabel.INCONCLUSIVE_DEFINITION, (0, 1, 1)),
        ],
    )
    def test_indicators(self, outcome, expected):
        f = compute_attribution_features(outcome)
        assert (f["evidence_deficit"], f["policy_gap"], f["inconclusive"]) == expected


class TestAssembleFeatureVector:
    def test_direct_trace_all_families(self):
        fv = assemble_feature_vector(make_trace())
        names = fv.qualified_names()
        assert names == catalog_names()
        assert len(names) == 45
        m = fv.as_mapping()
        assert m["sequence.absent"] == 1.0
        assert m["sequence.ppl"] == 1.0

    def test_single_family_cardinality(self):
        fv = assemble_feature_vector(make_trace(), include={FeatureFamily.OUTCOME_TOPK})
        assert len(fv.entries) == 8

    def test_exclusion_removes_names(self):
        include = [f for f in ALL_FAMILIES if f is not FeatureFamily.ATTRIBUTION]
        fv = assemble_feature_vector(make_trace(), include=include)
        assert not any(n.startswith("attribution.") for n in fv.qualified_names())
        assert len(fv.entries) == 42

    def test_empty_include_rejected(self):
        with pytest.raises(ValueError):
            assemble_feature_vector(make_trace(), include=())

    def test_no_label_mass_propagates(self):
        trace = make_trace(outcome_probs={"1": 0.6, "junk": 0.4})
        trace.outcome_record().candidates = [TokenCandidate("junk", math.log(1.0))]
        trace.outcome_record().chosen = TokenCandidate("junk", math.log(1.0))
        with pytest.raises(NoLabelMass):
            assemble_feature_vector(trace)

    def test_deterministic(self):
        a = assemble_feature_vector(make_trace(reasoning_logprobs=(-0.4, -0.9)))
        b = assemble_feature_vector(make_trace(reasoning_logprobs=(-0.4, -0.9)))
        assert a == b

    def test_token_outcome_wins_for_attribution(self):
        # structured says YES but the emitted token is the abstention "2"
        trace = make_trace(
            outcome=OutcomeLabel.YES,
            outcome_probs={"2": 0.9, "1": 0.1},
        )
        trace.tokens[0] = make_outcome_record({"2": 0.9, "1": 0.1}, chosen_surface="2")
        fv = assemble_feature_vector(trace, include={FeatureFamily.ATTRIBUTION})
        assert fv.as_mapping()["attribution.evidence_deficit"] == 1.0


class TestOracleEquivalence:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(min_value=-15, max_value=0), min_size=2, max_size=5))
    def test_against_mpmath(self, logprobs):
        import mpmath

        mpmath.mp.dps = 50
        dist = renormalize_topk(logprobs)
        f = compute_topk_features(dist)

        exps = [mpmath.exp(mpmath.mpf(repr(lp))) for lp in logprobs]
        total = sum(exps)
        probs = sorted((e / total for e in exps), reverse=True)
        entropy = -sum(p * mpmath.log(p, 2) for p in probs if p > 0)
        assert f["entropy"] == pytest.approx(float(entropy), abs=1e-9)
        assert f["msp"] == pytest.approx(float(probs[0]), abs=1e-9)
        assert f["margin"] == pytest.approx(float(probs[0] - probs[1]), abs=1e-9)
