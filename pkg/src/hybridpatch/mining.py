"""Hard negative mining inside a batch of positive pairs.

Given ``N`` positives, the network encodes the ``N`` X patches and the ``N``
Y patches once.  ``M = round(h_m * N)`` anchors drawn at random are paired
with their most confusable Y patch (smallest descriptor distance, or largest
match probability for the Softmax variant); the remaining anchors get a
random partner.  Only the ``M x (N - 1)`` anchor/candidate scores are
evaluated, on cached encodings, never through the full network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import NONMATCH, PatchPair, random_partners
from .model import Arch, HybridNetwork, Modality, Variant, encode_batched, score_matrix


@dataclass(frozen=True)
class MiningConfig:
    h_m: float = 0.8
    enabled: bool = True
    start_epoch: int = 0  # zero-based epoch from which mining is active
    head_scores: bool = True  # Softmax variant: rank by head probability, else by descriptor distance

    def __post_init__(self) -> None:
        if not 0.0 <= self.h_m <= 1.0:
            raise ValueError(f"h_m must lie in [0, 1], got {self.h_m}")
        if self.start_epoch < 0:
            raise ValueError("start_epoch must be >= 0")


def n_mined(n: int, h_m: float) -> int:
    """``round(h_m * n)`` with halves rounded up."""
    return int(math.floor(h_m * n + 0.5))


@dataclass
class MiningResult:
    partners: np.ndarray  # partners[i] = j, the Y row paired with X row i
    mined: np.ndarray  # bool mask of anchors whose partner was mined
    n_scores: int  # anchor/candidate scores evaluated
    n_encoded: int = 0  # patches pushed through the network

    @property
    def n_mined(self) -> int:
        return int(self.mined.sum())


def hardness(net: HybridNetwork, ax: np.ndarray, by: np.ndarray, part: str, head_scores: bool = True) -> np.ndarray:
    """Anchor-by-candidate matrix where *smaller is harder*."""
    if net.variant is Variant.SOFTMAX and head_scores:
        return -score_matrix(net, ax, by, part)
    ax = np.asarray(ax, dtype=np.float64)
    by = np.asarray(by, dtype=np.float64)
    d2 = (ax * ax).sum(1)[:, None] + (by * by).sum(1)[None, :] - 2.0 * ax @ by.T
    return np.sqrt(np.maximum(d2, 0.0))


def select_negatives(
    net: HybridNetwork,
    enc_x: np.ndarray,
    enc_y: np.ndarray,
    cfg: MiningConfig,
    rng: np.random.Generator,
    part: str = "hybrid",
) -> MiningResult:
    """Choose one negative partner per anchor from cached encodings.

    Hardness ties resolve to the lowest candidate index.
    """
    n = len(enc_x)
    if n < 2:
        raise ValueError(f"mining needs at least 2 positives, got {n}")
    partners = random_partners(n, rng)
    mined = np.zeros(n, dtype=bool)
    m = n_mined(n, cfg.h_m) if cfg.enabled else 0
    if m == 0:
        return MiningResult(partners, mined, 0)
    anchors = np.sort(rng.choice(n, size=m, replace=False))
    h = hardness(net, enc_x[anchors], enc_y, part, cfg.head_scores)
    h[np.arange(m), anchors] = np.inf
    partners[anchors] = np.argmin(h, axis=1)
    mined[anchors] = True
    return MiningResult(partners, mined, m * (n - 1))


def mine_batch(
    net: HybridNetwork,
    positives: Sequence[PatchPair],
    cfg: MiningConfig,
    rng: np.random.Generator,
    arch: Arch = Arch.HYBRID,
) -> tuple[list[PatchPair], MiningResult]:
    """Negatives for a batch of normalised positive pairs.

    Encodes the X patches and the Y patches in one gradient-free pass per
    modality and returns ``N`` non-matching pairs ``(x_i, y_j)``.
    """
    n = len(positives)
    if n < 2:
        raise ValueError(f"mining needs at least 2 positives, got {n}")
    xs = np.stack([p.x for p in positives])[:, None].astype(np.float32)
    ys = np.stack([p.y for p in positives])[:, None].astype(np.float32)
    part = Arch(arch).main_part
    ex = encode_batched(net, xs, Modality.X, arch)[part]
    ey = encode_batched(net, ys, Modality.Y, arch)[part]
    res = select_negatives(net, ex, ey, cfg, rng, part)
    res.n_encoded = 2 * n
    negatives = [
        PatchPair(
            positives[i].x,
            positives[j].y,
            NONMATCH,
            f"{'mined' if res.mined[i] else 'random'}:{i}:{j}",
        )
        for i, j in enumerate(res.partners.tolist())
    ]
    return negatives, res


@dataclass
class HardnessReport:
    counts: np.ndarray
    edges: np.ndarray
    inactive_fraction: float | None  # share of negatives at distance >= margin (L2 only)
    mean_score: float


def hardness_from_distances(dist: np.ndarray, bins: int = 20, margin: float = 1.0, range_=(0.0, 2.0)) -> HardnessReport:
    dist = np.asarray(dist, dtype=np.float64)
    lo, hi = range_
    hi = max(hi, float(dist.max(initial=0.0)))
    counts, edges = np.histogram(dist, bins=bins, range=(lo, hi))
    inactive = float(np.mean(dist >= margin)) if len(dist) else 0.0
    return HardnessReport(counts, edges, inactive, float(dist.mean()) if len(dist) else 0.0)


def hardness_histogram(
    net: HybridNetwork,
    pairs: Sequence[PatchPair],
    bins: int = 20,
    margin: float = 1.0,
    arch: Arch = Arch.HYBRID,
) -> HardnessReport:
    """Histogram of negative-pair scores for normalised, labelled ``pairs``.

    For the L2 variant the scores are distances and the report includes the
    fraction of negatives beyond the hinge margin (which contribute no
    gradient).  For the Softmax variant the scores are match probabilities.
    """
    negs = [p for p in pairs if p.label == NONMATCH]
    if not negs:
        return HardnessReport(np.zeros(bins, np.int64), np.linspace(0, 1, bins + 1), None, 0.0)
    part = Arch(arch).main_part
    xs = np.stack([p.x for p in negs])[:, None].astype(np.float32)
    ys = np.stack([p.y for p in negs])[:, None].astype(np.float32)
    ex = encode_batched(net, xs, Modality.X, arch)[part]
    ey = encode_batched(net, ys, Modality.Y, arch)[part]
    if net.variant is Variant.L2:
        dist = np.sqrt(np.sum((ex.astype(np.float64) - ey) ** 2, axis=1))
        return hardness_from_distances(dist, bins, margin)
    probs = np.diag(score_matrix(net, ex, ey, part)) if len(ex) <= 512 else np.array(
        [score_matrix(net, ex[i : i + 1], ey[i : i + 1], part)[0, 0] for i in range(len(ex))]
    )
    counts, edges = np.histogram(probs, bins=bins, range=(0.0, 1.0))
    return HardnessReport(counts, edges, None, float(probs.mean()))
