"""Matching objectives: hinge on descriptor distance, softmax same/not-same,
and the composite hybrid loss with its two auxiliary terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Arch, Encoding, HybridNetwork, Variant, pair_logits
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    variant: Variant = Variant.L2
    margin: float = 1.0
    main_weight: float = 1.0
    aux_weight_siam: float = 1.0
    aux_weight_asym: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        for name in ("main_weight", "aux_weight_siam", "aux_weight_asym"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True)
class PairIndex:
    """Pairs inside a batch: row ``ix[k]`` of the X encodings against row ``iy[k]`` of the Y encodings."""

    ix: np.ndarray
    iy: np.ndarray
    labels: np.ndarray

    @classmethod
    def positives_and_negatives(cls, partners: np.ndarray) -> "PairIndex":
        """All ``(i, i)`` matches followed by the ``(i, partners[i])`` non-matches."""
        n = len(partners)
        idx = np.arange(n)
        return cls(
            np.concatenate([idx, idx]),
            np.concatenate([idx, np.asarray(partners)]),
            np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)]),
        )

    def __len__(self) -> int:
        return len(self.labels)


def hinge_l2(dx: Tensor, dy: Tensor, labels, C: float = 1.0) -> Tensor:
    """Mean over rows of ``d`` (match) or ``max(0, C - d)`` (non-match)."""
    labels = np.asarray(labels).reshape(-1)
    if dx.shape != dy.shape:
        raise T.TensorShapeError(f"descriptor shapes differ: {dx.shape} vs {dy.shape}")
    d = T.row_distance(dx, dy)
    m = labels.astype(d.dtype)
    per_row = T.add(T.mul(d, m), T.mul(T.relu(T.sub(C, d)), 1.0 - m))
    return T.mean(per_row)


def softmax_match_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``(N, 2)`` logits; class 1 means *match*."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = T.tsum(T.mul(T.log_softmax(logits), onehot), axis=1)
    return T.mul(T.mean(picked), -1.0)


def pair_loss(net: HybridNetwork, a: Tensor, b: Tensor, labels, part: str, margin: float) -> Tensor:
    """The variant's loss family on already-gathered row pairs of one encoding part."""
    if net.variant is Variant.L2:
        return hinge_l2(a, b, labels, margin)
    return softmax_match_loss(pair_logits(net, a, b, part), labels)


def hybrid_loss(
    net: HybridNetwork,
    ex: Encoding,
    ey: Encoding,
    pairs: PairIndex,
    cfg: LossConfig,
    arch: Arch = Arch.HYBRID_AUX,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the main loss and the two auxiliary losses.

    Returns the differentiable total and the weighted parts
    ``{"main", "aux_siam", "aux_asym"}``; the parts add up to the total.
    For the single-branch architectures the main loss acts on that branch's
    output and both auxiliary parts are zero.
    """
    if cfg.variant is not net.variant:
        raise ValueError(f"loss configured for {cfg.variant.value!r} but network is {net.variant.value!r}")
    arch = Arch(arch)
    terms = [("main", arch.main_part, cfg.main_weight)]
    if arch in (Arch.HYBRID, Arch.HYBRID_AUX):
        terms += [("aux_siam", "siam", cfg.aux_weight_siam), ("aux_asym", "asym", cfg.aux_weight_asym)]

    total = None
    parts = {"main": 0.0, "aux_siam": 0.0, "aux_asym": 0.0}
    for key, part, weight in terms:
        if weight == 0:
            continue
        a = T.take_rows(ex.part(part), pairs.ix)
        b = T.take_rows(ey.part(part), pairs.iy)
        term = T.mul(pair_loss(net, a, b, pairs.labels, part, cfg.margin), float(weight))
        parts[key] = float(term.data)
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.Tensor(np.zeros((), dtype=ex.part(arch.main_part).dtype))
    return total, parts
