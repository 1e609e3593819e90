"""Reference adaptation strategies the main method is compared against.

Three lightweight baselines:

  * ``source_eval_step``   - no adaptation, pure evaluation;
  * ``bn_refresh_step``    - refresh batch-norm statistics only;
  * ``entropy_binary_step`` - entropy minimization augmented with binary
    feedback on k random samples: cross-entropy on confirmed predictions
    and complementary cross-entropy on contradicted ones. Only the
    batch-norm affine parameters receive the update.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .seeding import derive_seed
from .streams import StreamBatch

BASELINE_KINDS = ("source", "bn_stats", "entropy_binary")


def source_eval_step(model: nn.ModelState, batch: StreamBatch
                     ) -> tuple[nn.ModelState, float]:
    """Evaluate with running statistics; the model is a fixed point."""
    pred = nn.forward(model, batch.features,
                      nn.ForwardMode.deterministic()).argmax(axis=1)
    accuracy = float((pred == batch.hidden_labels).mean())
    return model, accuracy


def bn_refresh_step(model: nn.ModelState, batch: StreamBatch,
                    momentum: float = 0.3) -> tuple[nn.ModelState, float]:
    """Blend running statistics toward the batch's; parameters untouched."""
    nn.update_bn_stats(model, batch.features, momentum)
    pred = nn.forward(model, batch.features,
                      nn.ForwardMode.deterministic()).argmax(axis=1)
    accuracy = float((pred == batch.hidden_labels).mean())
    return model, accuracy


def entropy_binary_loss(probs: np.ndarray, correct_rows: np.ndarray,
                        correct_labels: np.ndarray, incorrect_rows: np.ndarray,
                        incorrect_labels: np.ndarray,
                        clip_eps: float = nn.CLIP_EPS) -> tuple[float, np.ndarray]:
    """Mean prediction entropy plus feedback terms, with its probs-gradient.

    Returns ``(value, dvalue_dprobs)`` for use with ``nn.grad``. Feedback
    terms average cross-entropy over confirmed rows and complementary
    cross-entropy over contradicted rows; either set may be empty.
    """
    n = probs.shape[0]
    clipped = np.clip(probs, clip_eps, 1.0 - clip_eps)
    in_range = (probs > clip_eps) & (probs < 1.0 - clip_eps)

    entropy_rows = -(probs * np.log(clipped)).sum(axis=1)
    value = float(entropy_rows.mean())
    dprobs = -(np.log(clipped) + np.where(in_range, 1.0, 0.0)) / n

    if len(correct_rows):
        m = len(correct_rows)
        p = probs[correct_rows, correct_labels]
        value += float(-np.log(np.clip(p, clip_eps, 1.0 - clip_eps)).mean())
        live = (p > clip_eps) & (p < 1.0 - clip_eps)
        dprobs[correct_rows, correct_labels] += np.where(
            live, -1.0 / np.clip(p, clip_eps, 1.0 - clip_eps), 0.0) / m
    if len(incorrect_rows):
        m = len(incorrect_rows)
        q = 1.0 - probs[incorrect_rows, incorrect_labels]
        value += float(-np.log(np.clip(q, clip_eps, 1.0 - clip_eps)).mean())
        live = (q > clip_eps) & (q < 1.0 - clip_eps)
        dprobs[incorrect_rows, incorrect_labels] += np.where(
            live, 1.0 / np.clip(q, clip_eps, 1.0 - clip_eps), 0.0) / m
    return value, dprobs


def entropy_binary_step(model: nn.ModelState, batch: StreamBatch, oracle,
                        k: int, lr: float, momentum: float = 0.3,
                        seed: int = 0) -> nn.ModelState:
    """One BN refresh plus one affine-only gradient step on the composite loss.

    The k feedback samples are drawn uniformly at random; predictions
    sent to the oracle are the deterministic ones taken before the
    refresh, matching the online accounting used everywhere else.
    """
    if batch.size < 2:
        raise ValueError("baseline steps require batches of at least 2 samples")
    pre_pred = nn.forward(model, batch.features,
                          nn.ForwardMode.deterministic()).argmax(axis=1)
    k = min(k, batch.size)
    if k > 0:
        rng = np.random.default_rng(derive_seed(seed, "entropy-query", batch.batch_index))
        chosen = np.sort(rng.choice(batch.size, size=k, replace=False))
    else:
        chosen = np.empty(0, dtype=np.int64)

    answers = np.asarray([
        oracle(int(batch.sample_ids[i]), batch.features[i], int(pre_pred[i]))
        for i in chosen
    ], dtype=np.int64)

    nn.update_bn_stats(model, batch.features, momentum)

    correct_rows = chosen[answers == 1] if k else chosen
    incorrect_rows = chosen[answers == -1] if k else chosen

    def loss_fn(probs):
        return entropy_binary_loss(
            probs, correct_rows, pre_pred[correct_rows],
            incorrect_rows, pre_pred[incorrect_rows])

    _, gradient = nn.grad(model, batch.features, nn.ForwardMode.deterministic(), loss_fn)
    # Entropy-minimization convention: adapt the BN affine parameters only.
    for w in gradient.weights + gradient.biases:
        w[...] = 0.0
    nn.sgd_step(model, gradient, lr, weight_decay=0.0)
    return model
