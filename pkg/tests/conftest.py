import math

import pytest

from lppgate.schema import (
    ConfidenceBand,
    OutcomeLabel,
    ReasoningStep,
    ResponseTrace,
    Span,
    StructuredResponse,
    TokenCandidate,
    TokenRecord,
)


def make_outcome_record(surface_logprobs, chosen_surface=None):
    """Build an outcome-span TokenRecord from {surface: prob-or-logprob}.

    Values <= 0 are treated as logprobs, values in (0, 1] as probabilities.
    """
    candidates = []
    for surface, value in surface_logprobs.items():
        logprob = value if value <= 0 else math.log(value)
        candidates.append(TokenCandidate(surface, logprob))
    if chosen_surface is None:
        chosen = max(candidates, key=lambda c: c.logprob)
    else:
        chosen = next(c for c in candidates if c.surface == chosen_surface)
    return TokenRecord(chosen=chosen, candidates=candidates, span=Span.OUTCOME)


def make_trace(
    item_id="item-1",
    outcome=OutcomeLabel.YES,
    outcome_probs=None,
    reasoning_logprobs=(),
    p_correct=85,
    band=ConfidenceBand.H,
    steps=(),
    attempt=1,
):
    if outcome_probs is None:
        outcome_probs = {str(int(outcome)): 0.7, "0" if outcome else "1": 0.2, "2": 0.1}
    record = make_outcome_record(outcome_probs, chosen_surface=str(int(outcome)))
    tokens = [record]
    for lp in reasoning_logprobs:
        chosen = TokenCandidate(" tok", lp)
        tokens.append(
            TokenRecord(
                chosen=chosen,
                candidates=[chosen, TokenCandidate(" alt", lp - 1.0)],
                span=Span.REASONING,
            )
        )
    structured = StructuredResponse(
        outcome=outcome,
        reasoning_steps=tuple(ReasoningStep(i + 1, s) for i, s in enumerate(steps)),
        p_correct=p_correct,
        band=band,
    )
    return ResponseTrace(item_id, structured, tokens, attempt=attempt)


@pytest.fixture
def trace_factory():
    return make_trace
