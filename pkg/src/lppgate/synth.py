"""Synthetic trace generator with known ground truth.

Produces response traces whose outcome-token distributions, verbalized
confidence, and abstention behavior carry a configurable amount of
correctness signal, so the full pipeline can be exercised and audited at
desk scale against an exactly known answer key.

Construction: correctness z is drawn first at the configured error rate;
abstentions are a subset of the incorrect items (an abstention never
matches the binary truth), so realized error and abstention rates stay on
target and the correctness labeler reproduces z exactly. Outcome-token
distributions come from two Dirichlet regimes -- peaked when the model is
right, flat when it is wrong -- with a per-family mixing knob that dials
the signal from none (0.0) to deterministic (1.0). The "attribution" knob
controls how confident abstained errors look: at 1.0 they are fully
peaked, i.e. invisible to probability-only uncertainty signals and
detectable only through the abstention flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .schema import (
    ConfidenceBand,
    OutcomeLabel,
    ReasoningStep,
    ResponseTrace,
    Span,
    StructuredResponse,
    TokenCandidate,
    TokenRecord,
    snap_confidence,
)

__all__ = ["SynthConfig", "LabelRow", "generate_corpus", "DEFAULT_SIGNAL"]

DEFAULT_SIGNAL: dict[str, float] = {
    "outcome_topk": 0.9,
    "verbalized": 0.3,
    "sequence": 0.5,
    "attribution": 1.0,
}

_PEAKED_ALPHA = (14.0, 1.0, 1.0, 1.0, 1.0)
_FLAT_ALPHA = (2.5, 2.5, 2.5, 2.5, 2.5)
_JUNK_SURFACES = (" the", " is", " a")
_BAND_EDGES = ((0.2, ConfidenceBand.VL), (0.4, ConfidenceBand.L), (0.6, ConfidenceBand.M), (0.8, ConfidenceBand.H))


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 3000
    error_rate: float = 0.15
    abstention_rate: float = 0.03
    p_violating: float = 0.5
    signal: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_SIGNAL))
    cot: bool = False
    surface_split_rate: float = 0.1
    p_correct_missing_rate: float = 0.02
    seed: int = 42

    def __post_init__(self):
        for name, value in (
            ("error_rate", self.error_rate),
            ("abstention_rate", self.abstention_rate),
            ("p_violating", self.p_violating),
        ):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")


@dataclass(frozen=True)
class LabelRow:
    item_id: str
    ground_truth: int
    llm_outcome: int


def _band_for(confidence: float) -> ConfidenceBand:
    for edge, band in _BAND_EDGES:
        if confidence < edge:
            return band
    return ConfidenceBand.VH


def _outcome_distribution(
    rng: np.random.Generator, peaked: bool, chosen_surface: str, split_rate: float
) -> tuple[list[TokenCandidate], TokenCandidate]:
    probs = np.sort(rng.dirichlet(_PEAKED_ALPHA if peaked else _FLAT_ALPHA))[::-1]
    digits = ["0", "1", "2", "3"]
    digits.remove(chosen_surface)
    others = [str(s) for s in rng.permutation(digits + [str(rng.choice(_JUNK_SURFACES))])]
    surfaces = [chosen_surface] + others

    candidates = []
    chosen = None
    do_split = rng.random() < split_rate and 0.7 * probs[0] > probs[1]
    for surface, p in zip(surfaces, probs):
        if surface == chosen_surface and do_split:
            # split the winning label's mass across two surface forms
            chosen = TokenCandidate(surface, float(np.log(0.7 * p)))
            candidates.append(chosen)
            candidates.append(TokenCandidate(" " + surface, float(np.log(0.3 * p))))
        else:
            cand = TokenCandidate(surface, float(np.log(p)))
            if surface == chosen_surface:
                chosen = cand
            candidates.append(cand)
    return candidates, chosen


def _reasoning_records(rng: np.random.Generator, z: int, strength: float) -> list[TokenRecord]:
    records = []
    informative = rng.random() < strength
    fluent = bool(z) if informative else bool(rng.integers(0, 2))
    lo, hi = (0.6, 0.95) if fluent else (0.2, 0.8)
    for t in range(int(rng.integers(15, 40))):
        p_chosen = float(rng.uniform(lo, hi))
        rest = rng.dirichlet((1.0,) * 4) * (1.0 - p_chosen)
        chosen = TokenCandidate(f" w{t}", float(np.log(p_chosen)))
        candidates = [chosen] + [
            TokenCandidate(f" v{t}_{j}", float(np.log(p))) for j, p in enumerate(rest)
        ]
        records.append(TokenRecord(chosen=chosen, candidates=candidates, span=Span.REASONING))
    return records


def generate_corpus(cfg: SynthConfig) -> tuple[list[ResponseTrace], list[LabelRow]]:
    """Generate (traces, label rows); byte-identical for identical configs."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_items
    n_err = int(round(n * cfg.error_rate))
    n_abstain = min(int(round(n * cfg.abstention_rate)), n_err)
    error_idx = rng.choice(n, size=n_err, replace=False)
    abstain_set = set(int(i) for i in error_idx[:n_abstain])
    error_set = set(int(i) for i in error_idx)

    signal = {**DEFAULT_SIGNAL, **dict(cfg.signal)}
    traces: list[ResponseTrace] = []
    labels: list[LabelRow] = []
    for i in range(n):
        item_id = f"synth-{i:06d}"
        truth = int(rng.random() < cfg.p_violating)
        z = 0 if i in error_set else 1
        if i in abstain_set:
            outcome = OutcomeLabel(int(rng.choice([2, 3])))
        elif z == 1:
            outcome = OutcomeLabel.YES if truth else OutcomeLabel.NO
        else:
            outcome = OutcomeLabel.NO if truth else OutcomeLabel.YES

        if i in abstain_set:
            peaked = rng.random() < signal["attribution"]
        elif rng.random() < signal["outcome_topk"]:
            peaked = z == 1
        else:
            peaked = bool(rng.integers(0, 2))
        candidates, chosen = _outcome_distribution(
            rng, peaked, str(int(outcome)), cfg.surface_split_rate
        )
        outcome_record = TokenRecord(chosen=chosen, candidates=candidates, span=Span.OUTCOME)

        if rng.random() < signal["verbalized"]:
            conf = rng.uniform(0.78, 0.96) if z == 1 else rng.uniform(0.45, 0.75)
        else:
            conf = rng.uniform(0.5, 0.95)
        p_correct = None if rng.random() < cfg.p_correct_missing_rate else snap_confidence(round(conf * 100))
        band = _band_for(conf)

        steps: tuple[ReasoningStep, ...] = ()
        tokens = [outcome_record]
        if cfg.cot:
            steps = tuple(ReasoningStep(k + 1, f"consider aspect {k + 1}") for k in range(3))
            tokens = tokens + _reasoning_records(rng, z, signal["sequence"])

        structured = StructuredResponse(outcome, steps, p_correct, band)
        traces.append(ResponseTrace(item_id, structured, tokens, attempt=1))
        labels.append(LabelRow(item_id, truth, int(outcome)))
    return traces, labels
