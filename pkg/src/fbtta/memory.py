"""Bounded FIFO pools of binary-feedback records."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FeedbackRecord:
    """A queried sample: its features, the prediction shown, and the +-1 answer."""

    features: np.ndarray
    predicted_label: int
    feedback: int

    def __post_init__(self):
        if self.feedback not in (1, -1):
            raise ValueError(f"feedback must be +1 or -1: {self.feedback}")


class ReplayMemory:
    """FIFO pool with a hard capacity; inserting past it evicts the oldest record."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError(f"capacity must be non-negative: {capacity}")
        self.capacity = capacity
        self._records: deque[FeedbackRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[FeedbackRecord, ...]:
        return tuple(self._records)

    def insert(self, record: FeedbackRecord) -> "ReplayMemory":
        if not isinstance(record, FeedbackRecord):
            raise TypeError("ReplayMemory stores FeedbackRecord instances")
        self._records.append(record)
        return self

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Features and predicted labels as arrays; empty arrays when empty."""
        if not self._records:
            return np.empty((0, 0)), np.empty(0, dtype=np.int64)
        feats = np.stack([r.features for r in self._records])
        labels = np.asarray([r.predicted_label for r in self._records], dtype=np.int64)
        return feats, labels

    def snapshot(self) -> tuple[FeedbackRecord, ...]:
        return tuple(self._records)

    def restore(self, snapshot) -> None:
        self._records = deque(snapshot, maxlen=self.capacity)
