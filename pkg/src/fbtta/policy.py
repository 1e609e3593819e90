"""MC-dropout policy estimation, uncertainty-driven selection, and calibration.

The per-sample policy is the mean of the softmax outputs over several
stochastic dropout passes; the confidence of a sample is the policy mass
assigned to the deterministic prediction. Ties in any argmax resolve to
the lowest class index, and ties in confidence ordering resolve to the
lowest batch index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .seeding import derive_seed


@dataclass(frozen=True)
class PolicyEstimate:
    """One batch's MC-dropout policy next to its deterministic predictions."""

    mc_probs: np.ndarray
    det_probs: np.ndarray
    det_pred: np.ndarray
    mc_pred: np.ndarray
    confidence: np.ndarray
    n_passes: int
    pass_seeds: tuple[int, ...]

    @property
    def batch_size(self) -> int:
        return self.mc_probs.shape[0]


@dataclass(frozen=True)
class SelectionResult:
    """Disjoint index sets: queried-for-feedback vs self-adaptation candidates."""

    feedback_indices: tuple[int, ...]
    agreement_indices: tuple[int, ...]

    def __post_init__(self):
        if set(self.feedback_indices) & set(self.agreement_indices):
            raise ValueError("feedback and agreement sets must be disjoint")


def pass_seeds(base_seed: int, n_passes: int) -> tuple[int, ...]:
    return tuple(derive_seed(base_seed, "mc-pass", p) for p in range(n_passes))


def estimate_policy(model: nn.ModelState, batch: np.ndarray, n_passes: int,
                    base_seed: int) -> PolicyEstimate:
    """Mean softmax over ``n_passes`` seeded dropout passes plus one deterministic pass.

    All passes normalize with the model's running batch-norm statistics;
    the estimate never touches batch statistics.
    """
    if n_passes < 1:
        raise ValueError(f"n_passes must be at least 1: {n_passes}")
    seeds = pass_seeds(base_seed, n_passes)
    det_probs = nn.forward(model, batch, nn.ForwardMode.deterministic())
    if all(r == 0.0 for r in model.dropout_rates):
        # Every stochastic pass degenerates to the deterministic one.
        mc_probs = det_probs.copy()
    else:
        mc_probs = np.zeros_like(det_probs)
        for seed in seeds:
            mc_probs += nn.forward(model, batch, nn.ForwardMode.dropout(seed))
        mc_probs /= n_passes
    det_pred = det_probs.argmax(axis=1)
    mc_pred = mc_probs.argmax(axis=1)
    confidence = mc_probs[np.arange(mc_probs.shape[0]), det_pred]
    return PolicyEstimate(
        mc_probs=mc_probs,
        det_probs=det_probs,
        det_pred=det_pred,
        mc_pred=mc_pred,
        confidence=confidence,
        n_passes=n_passes,
        pass_seeds=seeds,
    )


def select_for_feedback(estimate: PolicyEstimate, k: int,
                        strategy: str = "least_confidence",
                        seed: int | None = None) -> np.ndarray:
    """Pick the indices whose predictions get sent to the oracle.

    ``least_confidence`` takes the k smallest confidences in ascending
    order; ``random`` draws k indices uniformly without replacement under
    the given seed. A budget above the batch size truncates.
    """
    if k < 0:
        raise ValueError(f"budget k must be non-negative: {k}")
    n = estimate.batch_size
    k = min(k, n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if strategy == "least_confidence":
        order = np.argsort(estimate.confidence, kind="stable")
        return order[:k].astype(np.int64)
    if strategy == "random":
        if seed is None:
            raise ValueError("random selection requires a seed")
        rng = np.random.default_rng(derive_seed(seed, "feedback-draw"))
        return rng.choice(n, size=k, replace=False).astype(np.int64)
    raise ValueError(f"unknown selection strategy: {strategy}")


def agreement_set(estimate: PolicyEstimate, feedback_indices) -> np.ndarray:
    """Non-queried indices whose deterministic and MC-dropout argmaxes coincide."""
    feedback = set(int(i) for i in np.asarray(feedback_indices, dtype=np.int64).ravel())
    if feedback and (min(feedback) < 0 or max(feedback) >= estimate.batch_size):
        raise ValueError("feedback indices out of range for this batch")
    agree = estimate.det_pred == estimate.mc_pred
    indices = [i for i in range(estimate.batch_size) if i not in feedback and agree[i]]
    return np.asarray(indices, dtype=np.int64)


def expected_calibration_error(confidences, correct, n_bins: int = 15) -> float:
    """Binned |accuracy - confidence| gap over equal-width bins of (0, 1].

    Bins are right-closed; a confidence of exactly zero lands in the
    first bin. Empty bins contribute nothing.
    """
    confidences = np.asarray(confidences, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if confidences.shape != correct.shape:
        raise ValueError("confidences and correctness vectors differ in length")
    if n_bins < 1:
        raise ValueError(f"n_bins must be at least 1: {n_bins}")
    if confidences.size == 0:
        return 0.0
    if np.any(confidences < 0.0) or np.any(confidences > 1.0):
        raise ValueError("confidences must lie in [0, 1]")
    bin_ids = np.clip(np.ceil(confidences * n_bins).astype(int), 1, n_bins)
    total = confidences.size
    ece = 0.0
    for b in range(1, n_bins + 1):
        members = bin_ids == b
        count = int(members.sum())
        if count == 0:
            continue
        acc = float(correct[members].mean())
        conf = float(confidences[members].mean())
        ece += (count / total) * abs(acc - conf)
    return float(ece)
