"""Labeled corpus construction: correctness labels, resampling, splits.

Correctness is binary: z=1 when the emitted decision matches the ground
truth (yes on violating, no on non-violating); abstentions never match and
count as incorrect, which keeps them escalate-prone downstream.

Class imbalance on the training portion is handled by Tomek-link boundary
cleaning followed by seeded random undersampling of the majority class,
with abstention examples always retained. Splitting fixes the number of
negative (error) cases in the test set and carves a validation fraction
out of the remaining training pool, stratified on z.

Every operation is a deterministic function of the example contents and
the seed: internal processing uses item_id-sorted order, so permuting the
input rows selects the same item_ids.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import FeatureVector
from .schema import OutcomeLabel

__all__ = [
    "LabeledExample",
    "SplitSpec",
    "ResampleConfig",
    "InsufficientNegatives",
    "RatioUnreachableWarning",
    "label_correctness",
    "make_example",
    "tomek_links",
    "random_undersample",
    "resample",
    "stratified_split",
]


class InsufficientNegatives(ValueError):
    """The requested split would leave no negatives to train on."""


class RatioUnreachableWarning(UserWarning):
    """Protected abstention examples alone exceed the undersampling target;
    the target is relaxed upward instead of failing."""


@dataclass
class LabeledExample:
    item_id: str
    features: FeatureVector
    llm_outcome: OutcomeLabel
    ground_truth: int  # 1 = violating, 0 = non-violating
    z: int

    @property
    def is_abstention(self) -> bool:
        return self.llm_outcome in (
            OutcomeLabel.INCONCLUSIVE_EVIDENCE,
            OutcomeLabel.INCONCLUSIVE_DEFINITION,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Dataset-profile split: 150 test negatives for the text profile, 45
    for the multimodal profile."""

    test_negative_count: int
    validation_fraction: float = 0.20
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.test_negative_count < 1:
            raise ValueError("test_negative_count must be positive")


@dataclass(frozen=True)
class ResampleConfig:
    strategy: str = "tomek_plus_random"
    target_majority_ratio: float = 4.0
    protect_abstentions: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.target_majority_ratio <= 0:
            raise ValueError("target_majority_ratio must be positive")
        if self.strategy != "tomek_plus_random":
            raise ValueError(f"unknown strategy {self.strategy!r}")


def label_correctness(llm_outcome: OutcomeLabel, ground_truth: int) -> int:
    """z=1 iff the decision matches the binary truth; abstentions are 0."""
    if llm_outcome is OutcomeLabel.YES:
        return 1 if ground_truth == 1 else 0
    if llm_outcome is OutcomeLabel.NO:
        return 1 if ground_truth == 0 else 0
    return 0


def make_example(
    item_id: str, features: FeatureVector, llm_outcome: OutcomeLabel, ground_truth: int
) -> LabeledExample:
    return LabeledExample(
        item_id=item_id,
        features=features,
        llm_outcome=llm_outcome,
        ground_truth=int(ground_truth),
        z=label_correctness(llm_outcome, int(ground_truth)),
    )


def _sorted_view(examples: Sequence[LabeledExample]) -> list[int]:
    """Canonical processing order: indices sorted by item_id."""
    return sorted(range(len(examples)), key=lambda i: examples[i].item_id)


def _majority_label(z: np.ndarray) -> int:
    # Ties count the correct class as majority, matching the usual imbalance
    # direction (most LLM decisions are correct).
    return 1 if int(np.sum(z == 1)) >= int(np.sum(z == 0)) else 0


def tomek_links(examples: Sequence[LabeledExample]) -> set[int]:
    """Indices of majority-class members of cross-class mutual-1-NN pairs.

    Distances are Euclidean over z-scored features (fit on the input set);
    distance ties resolve to the earlier item in item_id order.
    """
    if len(examples) < 2:
        return set()
    order = _sorted_view(examples)
    X = np.stack([examples[i].features.values() for i in order])
    z = np.array([examples[i].z for i in order], dtype=int)
    if len(np.unique(z)) < 2:
        return set()

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    Xs = (X - mean) / std

    sq = np.sum(Xs**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Xs @ Xs.T)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)  # first minimum = lowest sorted index on ties

    majority = _majority_label(z)
    removed: set[int] = set()
    for i in range(len(order)):
        j = int(nn[i])
        if nn[j] == i and z[i] != z[j]:
            loser = i if z[i] == majority else j
            removed.add(order[loser])
    return removed


def random_undersample(
    examples: Sequence[LabeledExample], cfg: ResampleConfig
) -> list[LabeledExample]:
    """Uniformly drop majority-class examples until majority:minority is at
    most the target ratio.

    Abstention examples are never removed; when the protected examples
    alone exceed the target, the target relaxes upward with a
    RatioUnreachableWarning rather than an error. Minority examples are
    never touched. Input order is preserved in the result.
    """
    z = np.array([e.z for e in examples], dtype=int)
    majority = _majority_label(z)
    maj_idx = [i for i, e in enumerate(examples) if e.z == majority]
    n_min = int(np.sum(z != majority))
    if n_min == 0:
        return list(examples)
    target_keep = int(cfg.target_majority_ratio * n_min)
    if len(maj_idx) <= target_keep:
        return list(examples)

    protected = [
        i for i in maj_idx if cfg.protect_abstentions and examples[i].is_abstention
    ]
    droppable = [i for i in maj_idx if i not in set(protected)]
    n_sample = target_keep - len(protected)
    if n_sample < 0:
        warnings.warn(
            f"{len(protected)} protected abstention examples exceed the majority "
            f"target of {target_keep}; keeping all of them",
            RatioUnreachableWarning,
        )
        n_sample = 0

    # Seeded choice over the item_id-sorted droppable pool for permutation
    # invariance.
    droppable_sorted = sorted(droppable, key=lambda i: examples[i].item_id)
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(droppable_sorted), size=min(n_sample, len(droppable_sorted)), replace=False)
    keep = set(protected) | {droppable_sorted[i] for i in chosen}
    return [e for i, e in enumerate(examples) if e.z != majority or i in keep]


def resample(
    examples: Sequence[LabeledExample], cfg: ResampleConfig
) -> tuple[list[LabeledExample], dict]:
    """Tomek-link cleaning followed by random undersampling; returns the
    reduced list plus a count report."""
    links = tomek_links(examples)
    cleaned = [e for i, e in enumerate(examples) if i not in links]
    reduced = random_undersample(cleaned, cfg)
    z_in = np.array([e.z for e in examples], dtype=int)
    z_out = np.array([e.z for e in reduced], dtype=int)
    report = {
        "input": {"total": len(examples), "z1": int(np.sum(z_in == 1)), "z0": int(np.sum(z_in == 0))},
        "tomek_removed": len(links),
        "undersampled": len(cleaned) - len(reduced),
        "output": {"total": len(reduced), "z1": int(np.sum(z_out == 1)), "z0": int(np.sum(z_out == 0))},
    }
    return reduced, report


def _take(pool: list[LabeledExample], count: int, rng: np.random.Generator) -> set[str]:
    """Seeded sample of item_ids from an item_id-sorted pool."""
    pool_sorted = sorted(pool, key=lambda e: e.item_id)
    idx = rng.choice(len(pool_sorted), size=count, replace=False)
    return {pool_sorted[i].item_id for i in idx}


def stratified_split(
    examples: Sequence[LabeledExample], spec: SplitSpec
) -> tuple[list[LabeledExample], list[LabeledExample], list[LabeledExample]]:
    """Partition into (train, validation, test).

    The test set receives exactly spec.test_negative_count z=0 examples
    plus positives matching the overall positive:negative proportion
    (capped at availability); the remainder splits into train/validation
    with the validation fraction stratified on z. Raises
    InsufficientNegatives when the request would exhaust the negatives
    entirely (an untrainable split).
    """
    negatives = [e for e in examples if e.z == 0]
    positives = [e for e in examples if e.z == 1]
    if spec.test_negative_count > len(negatives):
        raise InsufficientNegatives(
            f"requested {spec.test_negative_count} test negatives, have {len(negatives)}"
        )
    if spec.test_negative_count == len(negatives):
        raise InsufficientNegatives("split would leave zero negatives for training")
    if not positives:
        raise ValueError("no positive (z=1) examples to split")

    rng = np.random.default_rng(spec.seed)
    test_neg_ids = _take(negatives, spec.test_negative_count, rng)

    desired_pos = int(np.floor(spec.test_negative_count * len(positives) / len(negatives) + 0.5))
    test_pos_count = min(desired_pos, max(len(positives) - 2, 0))
    test_pos_ids = _take(positives, test_pos_count, rng)
    test_ids = test_neg_ids | test_pos_ids

    pool_neg = [e for e in negatives if e.item_id not in test_ids]
    pool_pos = [e for e in positives if e.item_id not in test_ids]
    val_neg_count = int(np.floor(spec.validation_fraction * len(pool_neg) + 0.5))
    val_pos_count = int(np.floor(spec.validation_fraction * len(pool_pos) + 0.5))
    if val_neg_count >= len(pool_neg):
        raise InsufficientNegatives("validation split would leave zero negatives in train")
    if val_pos_count >= len(pool_pos):
        raise ValueError("validation split would leave zero positives in train")
    val_ids = _take(pool_neg, val_neg_count, rng) | _take(pool_pos, val_pos_count, rng)

    by_id = sorted(examples, key=lambda e: e.item_id)
    test = [e for e in by_id if e.item_id in test_ids]
    validation = [e for e in by_id if e.item_id in val_ids]
    train = [e for e in by_id if e.item_id not in test_ids and e.item_id not in val_ids]
    return train, validation, test
