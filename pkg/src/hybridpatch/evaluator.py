"""Verification metrics and descriptor matching.

Scores are oriented so that higher means *more likely a match*; the L2
variant therefore scores a pair by its negated descriptor distance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import normalize_stack
from .model import DESCRIPTOR_DIM, Arch, Encoding, HybridNetwork, Modality, Variant, encode_batched, score_pair
from .tensor import Tensor

RECALL = 0.95


@dataclass(frozen=True)
class ScoredPair:
    score: float
    label: int  # 1 match, 0 non-match

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def _arrays(scored) -> tuple[np.ndarray, np.ndarray]:
    """Accept a list of :class:`ScoredPair` or a ``(scores, labels)`` tuple."""
    if isinstance(scored, tuple) and len(scored) == 2:
        scores, labels = (np.asarray(a) for a in scored)
    else:
        scored = list(scored)
        scores = np.array([p.score for p in scored], dtype=np.float64)
        labels = np.array([p.label for p in scored], dtype=np.int64)
    scores = scores.astype(np.float64).reshape(-1)
    labels = labels.astype(np.int64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.any(labels == 1) or not np.any(labels == 0):
        raise ValueError("need at least one positive and one negative")
    return scores, labels


def roc(scored) -> np.ndarray:
    """ROC operating points, ``(K, 2)`` rows of ``(FPR, TPR)``.

    One point per distinct score threshold ``t`` (pairs with score ``>= t``
    are accepted), swept from high to low, bracketed by ``(0, 0)`` and
    ``(1, 1)``.  Tied scores share a single point.
    """
    scores, labels = _arrays(scored)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y == 1)[last_of_group]
    fp = np.cumsum(y == 0)[last_of_group]
    tpr = tp / tp[-1]
    fpr = fp / fp[-1]
    return np.vstack([[0.0, 0.0], np.column_stack([fpr, tpr])])


def auc(scored) -> float:
    pts = roc(scored)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def fpr95(scored, recall: float = RECALL) -> float:
    """False positive rate at the highest threshold reaching ``recall``.

    Thresholds are the distinct scores; a pair is accepted when its score
    is ``>=`` the threshold, so tied pairs are accepted together.
    """
    pts = roc(scored)
    # TPR is nondecreasing along the sweep; the first point reaching the
    # target is the largest qualifying threshold and has the smallest FPR.
    k = int(np.argmax(pts[:, 1] >= recall - 1e-12))
    return float(pts[k, 0])


# ---------------------------------------------------------------------------
# descriptors and matching
# ---------------------------------------------------------------------------

DESCRIPTOR_MAGIC = b"HDSC"
_DHEADER = struct.Struct("<4sII")


class DescriptorFormatError(ValueError):
    pass


@dataclass
class DescriptorSet:
    modality: Modality
    vectors: np.ndarray  # (n, 128) float32
    source_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.modality = Modality(self.modality)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != DESCRIPTOR_DIM:
            raise ValueError(f"descriptors must be (n, {DESCRIPTOR_DIM}), got {self.vectors.shape}")
        if not self.source_ids:
            self.source_ids = [str(i) for i in range(len(self.vectors))]
        if len(self.source_ids) != len(self.vectors):
            raise ValueError(f"{len(self.source_ids)} ids for {len(self.vectors)} descriptors")

    def __len__(self) -> int:
        return len(self.vectors)

    def to_bytes(self) -> bytes:
        n, d = self.vectors.shape
        return _DHEADER.pack(DESCRIPTOR_MAGIC, n, d) + self.vectors.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, modality: Modality = Modality.X) -> "DescriptorSet":
        if len(blob) < _DHEADER.size:
            raise DescriptorFormatError("descriptor file shorter than its header")
        magic, n, d = _DHEADER.unpack_from(blob)
        if magic != DESCRIPTOR_MAGIC:
            raise DescriptorFormatError(f"bad descriptor magic {magic!r}")
        if d != DESCRIPTOR_DIM:
            raise DescriptorFormatError(f"descriptor width {d}, expected {DESCRIPTOR_DIM}")
        want = _DHEADER.size + 4 * n * d
        if len(blob) != want:
            raise DescriptorFormatError(f"descriptor file holds {len(blob)} bytes, header implies {want}")
        vec = np.frombuffer(blob, dtype="<f4", offset=_DHEADER.size).reshape(n, d).astype(np.float32)
        return cls(modality, vec)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, modality: Modality = Modality.X) -> "DescriptorSet":
        return cls.from_bytes(Path(path).read_bytes(), modality)


def describe(net: HybridNetwork, patches_u8: np.ndarray, modality: Modality, arch: Arch = Arch.HYBRID, ids=None) -> DescriptorSet:
    """Normalise raw ``(n, 64, 64)`` uint8 patches of one modality and encode them."""
    modality = Modality(modality)
    s = net.norm
    mean, std = (s.mean_x, s.std_x) if modality is Modality.X else (s.mean_y, s.std_y)
    batch = normalize_stack(patches_u8, mean, std).astype(net.siamese.params["conv0.weight"].dtype, copy=False)
    vec = encode_batched(net, batch, modality, arch)[Arch(arch).main_part]
    return DescriptorSet(modality, vec, list(ids) if ids is not None else [])


def knn_match(qx: DescriptorSet | np.ndarray, ry: DescriptorSet | np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Exact L2 nearest neighbours of every query row among the reference rows.

    Returns ``(indices, distances)``, both ``(n_queries, k)``, ascending by
    distance with ties broken by the lower reference index.
    """
    q = np.asarray(qx.vectors if isinstance(qx, DescriptorSet) else qx, dtype=np.float64)
    r = np.asarray(ry.vectors if isinstance(ry, DescriptorSet) else ry, dtype=np.float64)
    if len(r) == 0:
        raise ValueError("reference set is empty")
    if not 1 <= k <= len(r):
        raise ValueError(f"k must lie in [1, {len(r)}], got {k}")
    if q.shape[1:] != r.shape[1:]:
        raise ValueError(f"query width {q.shape[1:]} differs from reference width {r.shape[1:]}")
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k), dtype=np.float64)
    step = max(1, 4_000_000 // max(1, r.size))
    for s in range(0, len(q), step):
        diff = q[s : s + step, None, :] - r[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        # stable sort keeps equal distances in index order
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s : s + step] = order
        dist[s : s + step] = np.take_along_axis(d, order, axis=1)
    return idx, dist


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


def config_hash(config: dict | None) -> str:
    text = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    fpr95: float
    roc: list[tuple[float, float]]
    auc: float
    n_positive: int
    n_negative: int
    config_hash: str
    checkpoint_id: str

    def to_json(self) -> str:
        body = {
            "fpr95": self.fpr95,
            "auc": self.auc,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "config_hash": self.config_hash,
            "checkpoint_id": self.checkpoint_id,
            "roc": [list(p) for p in self.roc],
        }
        return json.dumps(body, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            d["fpr95"], [tuple(p) for p in d["roc"]], d["auc"], d["n_positive"], d["n_negative"],
            d["config_hash"], d["checkpoint_id"],
        )


def oriented_scores(net: HybridNetwork, ex: Encoding, ey: Encoding, arch: Arch = Arch.HYBRID) -> np.ndarray:
    """:func:`score_pair` turned into *higher is a better match*."""
    s = score_pair(net, ex, ey, arch)
    return -s if net.variant is Variant.L2 else s


def score_patches(net: HybridNetwork, xs_u8: np.ndarray, ys_u8: np.ndarray, arch: Arch = Arch.HYBRID) -> np.ndarray:
    """Oriented scores of aligned raw patch stacks ``(n, 64, 64)``."""
    part = Arch(arch).main_part
    dx = describe(net, xs_u8, Modality.X, arch).vectors
    dy = describe(net, ys_u8, Modality.Y, arch).vectors
    ex = Encoding(Modality.X, **{part: Tensor(dx)})
    ey = Encoding(Modality.Y, **{part: Tensor(dy)})
    return oriented_scores(net, ex, ey, arch)


def evaluate(
    net: HybridNetwork,
    xs_u8: np.ndarray,
    ys_u8: np.ndarray,
    labels: Sequence[int],
    config: dict | None = None,
    checkpoint: str = "",
    arch: Arch = Arch.HYBRID,
) -> EvalReport:
    """Score every pair and summarise with FPR95 and the ROC curve.

    Each distinct patch is encoded once: pairs sharing a patch reuse its
    descriptor (negatives recombine patches of the positives).
    """
    labels = np.asarray(labels, dtype=np.int64)
    return report_from_scores(score_patches(net, xs_u8, ys_u8, arch), labels, config, checkpoint)


def report_from_scores(scores: np.ndarray, labels: np.ndarray, config: dict | None, checkpoint: str) -> EvalReport:
    pts = roc((scores, labels))
    return EvalReport(
        fpr95=fpr95((scores, labels)),
        roc=[(float(a), float(b)) for a, b in pts],
        auc=float(np.trapezoid(pts[:, 1], pts[:, 0])),
        n_positive=int((labels == 1).sum()),
        n_negative=int((labels == 0).sum()),
        config_hash=config_hash(config),
        checkpoint_id=checkpoint,
    )


def evaluate_pairset(net: HybridNetwork, ps, config: dict | None = None, checkpoint: str = "", arch: Arch = Arch.HYBRID) -> EvalReport:
    """Evaluate a trainer ``PairSet``: its positives plus its fixed negatives.

    The positives are encoded once per modality and the negatives reuse
    those descriptors.
    """
    part = Arch(arch).main_part
    dx = describe(net, ps.xs, Modality.X, arch).vectors
    dy = describe(net, ps.ys, Modality.Y, arch).vectors
    ix, iy, labels = ps.labelled()
    ex = Encoding(Modality.X, **{part: Tensor(dx[ix])})
    ey = Encoding(Modality.Y, **{part: Tensor(dy[iy])})
    return report_from_scores(oriented_scores(net, ex, ey, arch), labels, config, checkpoint)
