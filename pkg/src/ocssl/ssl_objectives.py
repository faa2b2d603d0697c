"""Instance-discrimination losses: symmetric SimSiam and SimCLR's NT-Xent."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_TEMPERATURE = 0.5


@dataclass
class ViewPair:
    """Row-aligned features of two augmented views of the same samples."""

    z1: Tensor
    z2: Tensor

    def __post_init__(self):
        if self.z1.shape != self.z2.shape:
            raise ad.ShapeError(f"view features differ in shape: {self.z1.shape} vs {self.z2.shape}")

    def swapped(self) -> ViewPair:
        return ViewPair(self.z2, self.z1)


def neg_cosine(a: Tensor, b_t: Tensor) -> Tensor:
    """Mean over rows of the negative cosine similarity between ``a`` and ``b_t``."""
    if a.shape != b_t.shape:
        raise ad.ShapeError(f"neg_cosine: {a.shape} vs {b_t.shape}")
    if a.ndim == 1:
        return ad.scale(ad.tsum(ad.mul(ad.l2_normalize(a), ad.l2_normalize(b_t))), -1.0)
    return ad.scale(ad.mean(ad.rowdot(ad.l2_normalize(a), ad.l2_normalize(b_t))), -1.0)


def simsiam_loss(pair: ViewPair, predictor: Callable[[Tensor], Tensor]) -> Tensor:
    """``0.5 * D(h(z1), sg(z2)) + 0.5 * D(h(z2), sg(z1))`` with D the negative cosine."""
    p1, p2 = predictor(pair.z1), predictor(pair.z2)
    if p1.shape != pair.z1.shape:
        raise ad.ShapeError("predictor output width must equal the feature width")
    return ad.scale(neg_cosine(p1, pair.z2.detach()) + neg_cosine(p2, pair.z1.detach()), 0.5)


def nt_xent(pair: ViewPair, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Normalized-temperature cross-entropy over the ``2b`` anchors.

    Each anchor's positive is the other view of the same sample; the remaining
    ``2b - 2`` embeddings are negatives. Self-similarity is excluded.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b = pair.z1.shape[0]
    if b < 2:
        raise ValueError("nt_xent needs at least 2 samples per view (no negatives otherwise)")
    z = ad.l2_normalize(ad.concat_rows([pair.z1, pair.z2]))
    logits = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / temperature)
    n = 2 * b
    positives = np.concatenate([np.arange(b, n), np.arange(0, b)])
    not_self = ~np.eye(n, dtype=bool)
    per_anchor = ad.sub(ad.logsumexp_rows(logits, where=not_self), ad.pick(logits, positives))
    return ad.mean(per_anchor)


def ssl_loss(objective: str, pair: ViewPair, predictor=None, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    if objective == "simsiam":
        if predictor is None:
            raise ValueError("simsiam needs a predictor")
        return simsiam_loss(pair, predictor)
    if objective == "simclr":
        return nt_xent(pair, temperature)
    raise ValueError(f"unknown SSL objective {objective!r}")
