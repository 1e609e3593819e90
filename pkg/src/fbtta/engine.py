"""Online adaptation driven by binary feedback plus agreement self-supervision.

Per test batch the engine:

  1. predicts deterministically and estimates the MC-dropout policy;
  2. queries the oracle on the least-confident predictions (budget k)
     and files the answers into two FIFO pools, one per answer sign;
  3. refreshes and freezes the batch-norm statistics on the batch;
  4. for E epochs, recomputes the agreement set on the unqueried
     samples, evaluates the combined loss below, and takes an SGD step.

The combined loss treats the mean MC-dropout probability of the stored
prediction as a policy and scales each log-policy term by its reward:
confirmed predictions and agreement samples are pulled up, contradicted
predictions are pushed down,

    L = alpha * mean_{correct pool}   (-log pi(y|x))
      + alpha * mean_{incorrect pool} (+log pi(y|x))
      + beta  * mean_{agreement set}  (-log pi(y|x)),

with empty sets contributing zero and probabilities clipped before the
log. Hidden labels never influence any of this; they reach the engine
only through the oracle's +-1 answers and the accuracy fields of the
returned reports.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn
from .memory import FeedbackRecord, ReplayMemory
from .policy import (SelectionResult, agreement_set, estimate_policy,
                     select_for_feedback)
from .seeding import derive_seed
from .streams import OracleError, StreamBatch


@dataclass
class AdaptConfig:
    """Knobs of the adaptation loop. Defaults follow the small-scale recipe."""

    k: int = 3
    epochs: int = 3
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    n_passes: int = 4
    dropout_rate: float = 0.3
    bn_momentum: float = 0.3
    weight_decay: float = 0.0
    selection: str = "least_confidence"
    clip_eps: float = 1e-6
    seed: int = 0
    memory_capacity: int = 64

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be non-negative: {self.k}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1: {self.epochs}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive: {self.lr}")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be non-negative")
        if self.n_passes < 1:
            raise ValueError(f"n_passes must be at least 1: {self.n_passes}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout rate must lie in [0, 1): {self.dropout_rate}")
        if not (0.0 <= self.bn_momentum <= 1.0):
            raise ValueError(f"bn momentum must lie in [0, 1]: {self.bn_momentum}")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")
        if not (0.0 < self.clip_eps < 0.5):
            raise ValueError(f"clip_eps must lie in (0, 0.5): {self.clip_eps}")
        if self.memory_capacity < 0:
            raise ValueError("memory capacity must be non-negative")


@dataclass(frozen=True)
class FeedbackSchedule:
    """Query only every ``skip_period``-th batch; apply answers ``delay`` batches later."""

    skip_period: int = 1
    delay: int = 0

    def __post_init__(self):
        if self.skip_period < 1:
            raise ValueError(f"skip period must be at least 1: {self.skip_period}")
        if self.delay < 0:
            raise ValueError(f"delay must be non-negative: {self.delay}")


@dataclass
class AdaptReport:
    """Per-batch bookkeeping. Accuracies are metrics-only outputs."""

    batch_index: int
    segment_id: int
    n_samples: int
    pre_accuracy: float
    post_accuracy: float
    n_queried: int
    n_agreement: int
    mem_correct_size: int
    mem_incorrect_size: int
    loss_correct: float
    loss_incorrect: float
    loss_agreement: float
    rewards: tuple[int, ...]
    mean_confidence: float
    skipped: bool = False

    def __post_init__(self):
        for acc in (self.pre_accuracy, self.post_accuracy):
            if not (0.0 <= acc <= 1.0) and not self.skipped:
                raise ValueError(f"accuracy out of range: {acc}")


class NoOpBatch(Exception):
    """All three loss sets are empty; nothing to optimize this epoch."""


def reward_feedback(feedback: int) -> float:
    """Reward of a queried sample: the oracle's answer itself (+1 or -1)."""
    if feedback not in (1, -1):
        raise ValueError(f"feedback must be +1 or -1: {feedback}")
    return float(feedback)


def reward_agreement(in_agreement: bool) -> float:
    """Reward of an unqueried sample: 1 under agreement, else 0 (never negative)."""
    return 1.0 if in_agreement else 0.0


@dataclass(frozen=True)
class LossTerms:
    """Unweighted per-set means plus the policy values they were built from."""

    correct: float
    incorrect: float
    agreement: float
    total: float
    pi_correct: np.ndarray
    pi_incorrect: np.ndarray
    pi_agreement: np.ndarray


def adaptation_loss(model: nn.ModelState, mem_correct: ReplayMemory,
                    mem_incorrect: ReplayMemory, aba_features: np.ndarray,
                    aba_labels: np.ndarray, config: AdaptConfig,
                    mc_seed: int) -> tuple[float, nn.GradientVector, LossTerms]:
    """Value and gradient of the combined loss at the current parameters.

    One MC-dropout evaluation (``config.n_passes`` seeded passes) covers
    the stacked correct-pool, incorrect-pool and agreement samples, so
    all three terms share a single policy estimate.
    """
    x_c, y_c = mem_correct.stacked()
    x_i, y_i = mem_incorrect.stacked()
    aba_features = np.asarray(aba_features, dtype=np.float64)
    if aba_features.size == 0:
        aba_features = aba_features.reshape(0, model.arch.in_dim)
    aba_labels = np.asarray(aba_labels, dtype=np.int64)
    n_c, n_i, n_a = len(y_c), len(y_i), len(aba_labels)
    if n_c == 0 and n_i == 0 and n_a == 0:
        raise NoOpBatch("correct pool, incorrect pool and agreement set are all empty")

    blocks = [b for b in (x_c, x_i, aba_features) if b.shape[0] > 0]
    x_all = np.concatenate(blocks, axis=0)
    labels = np.concatenate([y_c, y_i, aba_labels]).astype(np.int64)

    # Signed per-row coefficients: loss = sum_i c_i * (-log clip(pi_i)).
    # The reward of each row carries the sign; incorrect answers flip it.
    coeffs = np.concatenate([
        np.full(n_c, config.alpha * reward_feedback(1) / max(n_c, 1)),
        np.full(n_i, config.alpha * reward_feedback(-1) / max(n_i, 1)),
        np.full(n_a, config.beta * reward_agreement(True) / max(n_a, 1)),
    ])

    seeds = [derive_seed(mc_seed, "mc-pass", p) for p in range(config.n_passes)]
    tapes = [nn.forward_tape(model, x_all, nn.ForwardMode.dropout(s)) for s in seeds]
    pi = sum(t.probs for t in tapes) / config.n_passes

    rows = np.arange(x_all.shape[0])
    pi_label = pi[rows, labels]
    clipped = np.clip(pi_label, config.clip_eps, 1.0 - config.clip_eps)
    in_range = (pi_label > config.clip_eps) & (pi_label < 1.0 - config.clip_eps)
    neg_log = -np.log(clipped)
    loss = float(np.dot(coeffs, neg_log))

    # d loss / d pi[i, y_i]; saturated probabilities contribute no gradient.
    dpi = np.zeros_like(pi)
    dpi[rows, labels] = np.where(in_range, -coeffs / clipped, 0.0)
    grad = nn.GradientVector.zeros_like(model)
    for tape in tapes:
        grad.add_(nn.backward_tape(tape, dpi / config.n_passes))

    def _mean(slc) -> float:
        return float(neg_log[slc].mean()) if slc.stop > slc.start else 0.0

    term_c = _mean(slice(0, n_c))
    term_i = -_mean(slice(n_c, n_c + n_i))  # +log pi convention for the incorrect pool
    term_a = _mean(slice(n_c + n_i, n_c + n_i + n_a))
    terms = LossTerms(
        correct=term_c,
        incorrect=term_i,
        agreement=term_a,
        total=config.alpha * term_c + config.alpha * term_i + config.beta * term_a,
        pi_correct=pi_label[:n_c].copy(),
        pi_incorrect=pi_label[n_c:n_c + n_i].copy(),
        pi_agreement=pi_label[n_c + n_i:].copy(),
    )
    return loss, grad, terms


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float((pred == labels).mean()) if len(labels) else 0.0


def adapt_batch(model: nn.ModelState, batch: StreamBatch, oracle,
                config: AdaptConfig, mem_correct: ReplayMemory,
                mem_incorrect: ReplayMemory, *, budget: int | None = None,
                record_sink: list | None = None) -> AdaptReport:
    """Run one batch of the adaptation loop, mutating model and memories.

    ``budget`` overrides ``config.k`` (used by feedback schedules);
    ``record_sink`` diverts freshly answered records away from the
    memories so a caller can apply them later (delayed labeling). If the
    oracle fails mid-batch, model and memories roll back to their
    pre-batch state and the report comes back flagged as skipped.
    """
    if batch.size < 2:
        raise ValueError("adaptation requires batches of at least 2 samples")
    params_before = nn.clone_model(model)
    mem_c_before = mem_correct.snapshot()
    mem_i_before = mem_incorrect.snapshot()
    k = config.k if budget is None else budget
    b = batch.batch_index

    estimate = estimate_policy(model, batch.features, config.n_passes,
                               derive_seed(config.seed, "select", b))
    pre_acc = _accuracy(estimate.det_pred, batch.hidden_labels)

    fb_idx = select_for_feedback(estimate, k, config.selection,
                                 seed=derive_seed(config.seed, "select-random", b))
    rewards = []
    try:
        # Feedback sources that batch their queries (the live session)
        # get the whole selection up front; answers still flow through
        # the per-sample synchronous call below.
        prepare = getattr(oracle, "prepare", None)
        if prepare is not None and len(fb_idx):
            prepare(b, [(int(batch.sample_ids[i]), batch.features[int(i)],
                         int(estimate.det_pred[int(i)]),
                         float(estimate.confidence[int(i)]))
                        for i in fb_idx])
        fresh_records = []
        for i in fb_idx:
            i = int(i)
            answer = oracle(int(batch.sample_ids[i]), batch.features[i],
                            int(estimate.det_pred[i]))
            rewards.append(int(reward_feedback(answer)))
            fresh_records.append(FeedbackRecord(
                features=batch.features[i].copy(),
                predicted_label=int(estimate.det_pred[i]),
                feedback=int(answer),
            ))
    except OracleError:
        nn.copy_state_into(params_before, model)
        mem_correct.restore(mem_c_before)
        mem_incorrect.restore(mem_i_before)
        return AdaptReport(
            batch_index=b, segment_id=batch.segment_id, n_samples=batch.size,
            pre_accuracy=pre_acc, post_accuracy=pre_acc, n_queried=0,
            n_agreement=0, mem_correct_size=len(mem_correct),
            mem_incorrect_size=len(mem_incorrect), loss_correct=0.0,
            loss_incorrect=0.0, loss_agreement=0.0, rewards=(),
            mean_confidence=float(estimate.confidence.mean()), skipped=True,
        )

    if record_sink is None:
        for record in fresh_records:
            (mem_correct if record.feedback == 1 else mem_incorrect).insert(record)
    else:
        record_sink.extend(fresh_records)

    nn.update_bn_stats(model, batch.features, config.bn_momentum)

    n_agreement_first = 0
    terms = None
    for epoch in range(config.epochs):
        epoch_est = estimate_policy(model, batch.features, config.n_passes,
                                    derive_seed(config.seed, "agree", b, epoch))
        aba_idx = agreement_set(epoch_est, fb_idx)
        # Constructing the pair enforces the disjointness invariant.
        selection = SelectionResult(feedback_indices=tuple(int(i) for i in fb_idx),
                                    agreement_indices=tuple(int(i) for i in aba_idx))
        if epoch == 0:
            n_agreement_first = len(selection.agreement_indices)
        try:
            _, gradient, terms = adaptation_loss(
                model, mem_correct, mem_incorrect,
                batch.features[aba_idx], epoch_est.det_pred[aba_idx],
                config, derive_seed(config.seed, "loss", b, epoch))
        except NoOpBatch:
            continue
        nn.sgd_step(model, gradient, config.lr, config.weight_decay)

    post_pred = nn.forward(model, batch.features,
                           nn.ForwardMode.deterministic()).argmax(axis=1)
    post_acc = _accuracy(post_pred, batch.hidden_labels)
    return AdaptReport(
        batch_index=b, segment_id=batch.segment_id, n_samples=batch.size,
        pre_accuracy=pre_acc, post_accuracy=post_acc, n_queried=len(fb_idx),
        n_agreement=n_agreement_first, mem_correct_size=len(mem_correct),
        mem_incorrect_size=len(mem_incorrect),
        loss_correct=terms.correct if terms else 0.0,
        loss_incorrect=terms.incorrect if terms else 0.0,
        loss_agreement=terms.agreement if terms else 0.0,
        rewards=tuple(rewards),
        mean_confidence=float(estimate.confidence.mean()),
    )


class StreamAdaptation:
    """Stateful fold of `adapt_batch` over consecutive batches.

    Owns the model and the two FIFO pools; the feedback schedule decides
    which batches may query and when answered records become visible.
    One instance serves both offline runs and the live session, so the
    two paths cannot drift apart.
    """

    def __init__(self, model: nn.ModelState, oracle, config: AdaptConfig,
                 schedule: FeedbackSchedule | None = None):
        self.model = model
        self.oracle = oracle
        self.config = config
        self.schedule = schedule or FeedbackSchedule()
        self.mem_correct = ReplayMemory(config.memory_capacity)
        self.mem_incorrect = ReplayMemory(config.memory_capacity)
        self.pending: deque[tuple[int, FeedbackRecord]] = deque()
        nn.set_dropout_rate(self.model, config.dropout_rate)

    def step(self, batch: StreamBatch) -> AdaptReport:
        while self.pending and self.pending[0][0] <= batch.batch_index:
            _, record = self.pending.popleft()
            self._insert(record)
        queried = batch.batch_index % self.schedule.skip_period == 0
        budget = self.config.k if queried else 0
        sink: list | None = [] if self.schedule.delay > 0 else None
        report = adapt_batch(self.model, batch, self.oracle, self.config,
                             self.mem_correct, self.mem_incorrect,
                             budget=budget, record_sink=sink)
        if sink:
            due = batch.batch_index + self.schedule.delay
            self.pending.extend((due, record) for record in sink)
        return report

    def _insert(self, record: FeedbackRecord) -> None:
        (self.mem_correct if record.feedback == 1 else self.mem_incorrect).insert(record)


def adapt_stream(model: nn.ModelState, stream, oracle, config: AdaptConfig,
                 schedule: FeedbackSchedule | None = None
                 ) -> tuple[nn.ModelState, list[AdaptReport]]:
    """Fold the per-batch loop over a stream; memories persist throughout."""
    adaptation = StreamAdaptation(model, oracle, config, schedule)
    reports = [adaptation.step(batch) for batch in stream]
    return model, reports
