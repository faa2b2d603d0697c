"""Replay memories: FIFO, reservoir and a simplified MinRed policy.

Entries keep the raw sample and, when the policy or strategy asks for it, a
stored feature ``z*``. Stored features are plain read-only arrays and never
carry gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

POLICIES = ("fifo", "reservoir", "minred")
DEFAULT_CAPACITY = 2000


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass
class BufferEntry:
    sample: np.ndarray
    feature: np.ndarray | None
    insert_seq: int


@dataclass
class ReplayBatch:
    samples: np.ndarray
    features: np.ndarray | None
    handles: list[int]

    def __len__(self):
        return len(self.handles)


class Buffer:
    """Fixed-capacity exemplar memory.

    Args:
        capacity: maximum number of stored exemplars.
        policy: ``fifo`` (evict oldest), ``reservoir`` (uniform over the stream)
            or ``minred`` (evict the most redundant stored feature).
        store_features: keep a feature per entry; required for ``minred``.
        seed: seeds the reservoir replacement draws.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, policy: str = "fifo",
                 store_features: bool = False, seed: int = 0):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if policy not in POLICIES:
            raise ValueError(f"unknown buffer policy {policy!r}")
        self.capacity = int(capacity)
        self.policy = policy
        self.store_features = store_features or policy == "minred"
        self.entries: list[BufferEntry] = []
        self.seen = 0
        self.next_seq = 0
        self.rng = np.random.default_rng(seed)
        self.stale_handles = 0

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return f"Buffer(policy={self.policy}, {len(self)}/{self.capacity}, seen={self.seen})"

    # -- insertion ---------------------------------------------------------------

    def insert(self, sample, feature=None):
        if self.store_features and feature is None:
            raise ValueError(f"{self.policy} buffer with stored features needs a feature per sample")
        entry = BufferEntry(_frozen(sample), None if feature is None else _frozen(feature), self.next_seq)
        self.next_seq += 1
        self.seen += 1
        if self.policy == "reservoir":
            if len(self.entries) < self.capacity:
                self.entries.append(entry)
            else:
                j = int(self.rng.integers(0, self.seen))
                if j < self.capacity:
                    self.entries[j] = entry
            return
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            if self.policy == "fifo":
                del self.entries[0]
            else:
                del self.entries[self._most_redundant()]

    def insert_batch(self, samples, features=None):
        for i in range(len(samples)):
            self.insert(samples[i], None if features is None else features[i])

    def _most_redundant(self) -> int:
        """Index of the entry whose highest cosine similarity to any other entry is largest."""
        f = np.stack([e.feature for e in self.entries])
        f = f / (np.linalg.norm(f, axis=1, keepdims=True) + 1e-12)
        sim = f @ f.T
        np.fill_diagonal(sim, -np.inf)
        return int(np.argmax(sim.max(axis=1)))

    # -- sampling ------------------------------------------------------------------

    def sample(self, b_r: int, rng: np.random.Generator) -> ReplayBatch:
        """Uniform draw of ``b_r`` entries; with replacement only while the buffer is smaller than ``b_r``."""
        n = len(self.entries)
        if n == 0 or b_r <= 0:
            return ReplayBatch(np.zeros((0, 0)), None, [])
        if n >= b_r:
            idx = rng.choice(n, size=b_r, replace=False)
        else:
            idx = rng.integers(0, n, size=b_r)
        chosen = [self.entries[i] for i in idx]
        samples = np.stack([e.sample for e in chosen])
        features = None
        if all(e.feature is not None for e in chosen):
            features = np.stack([e.feature for e in chosen])
        return ReplayBatch(samples, features, [e.insert_seq for e in chosen])

    def update_features(self, handles, z_r1, z_r2):
        """``z* <- 0.5 z* + 0.25 z_r1 + 0.25 z_r2`` for each referenced entry.

        Handles whose entry has been evicted since sampling are skipped and counted.
        """
        z_r1 = np.asarray(z_r1, dtype=np.float64)
        z_r2 = np.asarray(z_r2, dtype=np.float64)
        by_seq = {e.insert_seq: e for e in self.entries}
        for i, h in enumerate(handles):
            entry = by_seq.get(h)
            if entry is None:
                self.stale_handles += 1
                logger.debug("update_features: entry %d was evicted, skipping", h)
                continue
            if entry.feature is None:
                raise ValueError("entry has no stored feature to update")
            entry.feature = _frozen(0.5 * entry.feature + 0.25 * z_r1[i] + 0.25 * z_r2[i])

    # -- persistence -------------------------------------------------------------------

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {"seq": np.array([e.insert_seq for e in self.entries], dtype=np.int64)}
        if self.entries:
            arrays["samples"] = np.stack([e.sample for e in self.entries])
            if self.store_features:
                arrays["features"] = np.stack([e.feature for e in self.entries])
        meta = {"capacity": self.capacity, "policy": self.policy, "store_features": self.store_features,
                "seen": self.seen, "next_seq": self.next_seq, "rng": self.rng.bit_generator.state,
                "stale_handles": self.stale_handles}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> Buffer:
        buf = cls(meta["capacity"], meta["policy"], meta["store_features"])
        buf.seen = meta["seen"]
        buf.next_seq = meta["next_seq"]
        buf.stale_handles = meta.get("stale_handles", 0)
        buf.rng.bit_generator.state = meta["rng"]
        feats = arrays.get("features")
        for i, seq in enumerate(arrays["seq"]):
            buf.entries.append(BufferEntry(
                _frozen(arrays["samples"][i]), None if feats is None else _frozen(feats[i]), int(seq)))
        return buf
