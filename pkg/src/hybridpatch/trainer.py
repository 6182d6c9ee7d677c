"""SGD training loop with momentum, step learning-rate drops, early stopping
on validation loss, and a per-epoch JSON-lines log."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import (
    DatasetSplit,
    NormalizationStats,
    PatchPair,
    augment_arrays,
    normalize_stack,
    positives_of,
    random_partners,
)
from .losses import LossConfig, PairIndex, hybrid_loss
from .mining import MiningConfig, select_negatives
from .model import Arch, Encoding, HybridNetwork, Modality, encode, encode_batched, init_params
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Non-finite loss; ``batch`` is ``None`` when the validation pass diverged."""

    def __init__(self, epoch: int, batch: int | None, value: float):
        where = f"batch {batch}" if batch is not None else "validation"
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, {where}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128
    lr_drop_epochs: tuple[int, ...] = (75, 95)
    lr_drop_factor: float = 0.1
    early_stop_patience: int = 10
    max_epochs: int = 120
    seed: int = 0
    init_sigma: float = 0.01
    init_scheme: str = "he"
    arch: Arch = Arch.HYBRID_AUX
    timing: bool = False  # record wall-clock seconds in the log (breaks byte-identical logs)
    mining: MiningConfig = field(default_factory=MiningConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate of zero-based ``epoch``."""
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr * self.lr_drop_factor**drops

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"] = self.arch.value
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        d["loss"]["variant"] = self.loss.variant.value
        return d


# ---------------------------------------------------------------------------
# log
# ---------------------------------------------------------------------------

LOG_FIELDS = (
    "epoch", "lr",
    "train_total", "train_main", "train_aux_s", "train_aux_a",
    "val_total", "val_main", "val_aux_s", "val_aux_a",
    "mined_fraction", "seconds",
)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    train_main: float
    train_aux_s: float
    train_aux_a: float
    val_total: float
    val_main: float
    val_aux_s: float
    val_aux_a: float
    mined_fraction: float
    seconds: float | None = None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def best(self) -> EpochRecord | None:
        if self.best_epoch is None:
            return None
        return next(r for r in self.records if r.epoch == self.best_epoch)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        out = cls()
        for line in text.splitlines():
            if line.strip():
                out.append(EpochRecord(**json.loads(line)))
        if out.records:
            out.best_epoch = min(out.records, key=lambda r: r.val_total).epoch
        return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: list[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """In-place momentum SGD.

    ``v <- momentum * v + (grad + weight_decay * param)`` then
    ``param <- param - lr * v``.  ``decay_mask[i]`` false switches weight
    decay off for parameter ``i`` (used for biases).  A ``None`` gradient
    counts as zero.  ``state`` holds one velocity per parameter.
    """
    if not len(params) == len(grads) == len(state):
        raise ValueError(f"got {len(params)} params, {len(grads)} grads, {len(state)} velocities")
    mask = [True] * len(params) if decay_mask is None else list(decay_mask)
    for i, (p, g, v) in enumerate(zip(params, grads, state)):
        if v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(
                f"parameter {i}: shape {p.shape}, grad {None if g is None else g.shape}, velocity {v.shape}"
            )
        step = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=True)
        if weight_decay and mask[i]:
            step += weight_decay * p
        v *= momentum
        v += step
        p -= lr * v


class SGD:
    """Momentum SGD over a network's parameters; biases are not decayed."""

    def __init__(self, net: HybridNetwork, momentum: float = 0.9, weight_decay: float = 0.0):
        self.named = net.named_parameters()
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(t.data) for _, t in self.named]
        self.decay_mask = [not name.endswith(".bias") for name, _ in self.named]
        # parameters never reached by the arm's forward pass stay fixed
        self.active: list[bool] | None = None

    def step(self, lr: float) -> None:
        if self.active is None:
            self.active = [t.grad is not None for _, t in self.named]
        idx = [i for i, a in enumerate(self.active) if a]
        sgd_step(
            [self.named[i][1].data for i in idx],
            [self.named[i][1].grad for i in idx],
            [self.velocity[i] for i in idx],
            lr,
            self.momentum,
            self.weight_decay,
            [self.decay_mask[i] for i in idx],
        )


class EarlyStopping:
    """Stop once the monitored value has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch: int | None = None
        self.since = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Return ``(improved, stop)``."""
        if value < self.best:
            self.best, self.best_epoch, self.since = value, epoch, 0
            return True, False
        self.since += 1
        return False, self.since >= self.patience


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class PairSet:
    """Aligned positive patches (uint8) plus a fixed negative partner per row."""

    xs: np.ndarray
    ys: np.ndarray
    partners: np.ndarray

    def __len__(self) -> int:
        return len(self.xs)

    def labelled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row indices and labels of the positives followed by the negatives."""
        p = PairIndex.positives_and_negatives(self.partners)
        return p.ix, p.iy, p.labels


@dataclass
class TrainingData:
    train: PairSet
    validation: PairSet
    test: PairSet
    stats: NormalizationStats
    split: DatasetSplit


def _pair_set(pos: Sequence[PatchPair], idx: Sequence[int], seed) -> PairSet:
    xs = np.stack([pos[i].x for i in idx]) if len(idx) else np.zeros((0, 64, 64), np.uint8)
    ys = np.stack([pos[i].y for i in idx]) if len(idx) else np.zeros((0, 64, 64), np.uint8)
    n = len(idx)
    if n >= 2:
        partners = random_partners(n, np.random.default_rng(seed))
    else:
        partners = np.zeros(n, dtype=np.int64)
    return PairSet(xs, ys, partners)


def prepare_data(pairs: Sequence[PatchPair], split: DatasetSplit) -> TrainingData:
    """Gather split positives and draw fixed within-split negatives.

    Validation and test negatives pair each positive's X patch with the Y
    patch of another positive of the same split, drawn once from the split
    seed, so no patch crosses a split boundary.  Normalisation statistics
    come from the training positives alone.
    """
    pos = positives_of(pairs)
    n = len(pos)
    for name in ("train", "validation", "test"):
        bad = [i for i in getattr(split, name) if not 0 <= i < n]
        if bad:
            raise ValueError(f"{name} split refers to positive {bad[0]}, but there are only {n}")
    train = [pos[i] for i in split.train]
    stats = NormalizationStats.from_pairs(train)
    return TrainingData(
        _pair_set(pos, split.train, [split.seed, 0]),
        _pair_set(pos, split.validation, [split.seed, 1]),
        _pair_set(pos, split.test, [split.seed, 2]),
        stats,
        split,
    )


def _normalized(net: HybridNetwork, xs: np.ndarray, ys: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    s = net.norm
    return (
        normalize_stack(xs, s.mean_x, s.std_x).astype(dtype, copy=False),
        normalize_stack(ys, s.mean_y, s.std_y).astype(dtype, copy=False),
    )


def _as_encoding(parts: dict[str, np.ndarray], modality: Modality) -> Encoding:
    return Encoding(modality, **{k: Tensor(v) for k, v in parts.items()})


def pairset_loss(net: HybridNetwork, ps: PairSet, loss: LossConfig, arch: Arch) -> dict[str, float]:
    """Loss parts on a fixed pair set, without augmentation or mining."""
    dtype = net.siamese.params["conv0.weight"].dtype
    xs, ys = _normalized(net, ps.xs, ps.ys, dtype)
    ex = _as_encoding(encode_batched(net, xs, Modality.X, arch), Modality.X)
    ey = _as_encoding(encode_batched(net, ys, Modality.Y, arch), Modality.Y)
    with T.no_grad():
        total, parts = hybrid_loss(net, ex, ey, PairIndex.positives_and_negatives(ps.partners), loss, arch)
    return {"total": float(total.data), **parts}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent streams for data order, augmentation and mining, so that
    arms with and without mining see the same batches."""
    return tuple(np.random.default_rng([seed, k]) for k in range(3))  # type: ignore[return-value]


def train(
    net: HybridNetwork,
    data: TrainingData,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[HybridNetwork, TrainLog]:
    """Optimise ``net`` in place and return the best-validation copy and the log.

    The network's normalisation statistics are replaced by the training
    split's.  Raises :class:`DivergenceError` on a non-finite batch loss;
    ``net`` then holds the parameters from before the bad step.
    """
    if cfg.loss.variant is not net.variant:
        raise ValueError(f"loss configured for {cfg.loss.variant.value!r} but network is {net.variant.value!r}")
    if len(data.train) < 2 or len(data.validation) < 2:
        raise ValueError("training and validation splits need at least 2 positives each")
    net.norm = data.stats
    tlog = TrainLog()
    best = net.copy()
    if cfg.max_epochs == 0:
        return best, tlog

    dtype = net.siamese.params["conv0.weight"].dtype
    order_rng, aug_rng, mine_rng = _rngs(cfg.seed)
    opt = SGD(net, cfg.momentum, cfg.weight_decay)
    stopper = EarlyStopping(cfg.early_stop_patience)
    arch = cfg.arch
    part = arch.main_part
    n = len(data.train)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        mining = cfg.mining if epoch >= cfg.mining.start_epoch else dataclasses.replace(cfg.mining, enabled=False)
        perm = order_rng.permutation(n)
        sums = {"total": 0.0, "main": 0.0, "aux_siam": 0.0, "aux_asym": 0.0}
        n_batches = mined = negs = 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[s : s + cfg.batch_size]
            if len(idx) < 2:
                continue
            xs, ys = augment_arrays(data.train.xs[idx], data.train.ys[idx], aug_rng)
            xs, ys = _normalized(net, xs, ys, dtype)
            ex = encode(net, xs, Modality.X, arch)
            ey = encode(net, ys, Modality.Y, arch)
            res = select_negatives(net, ex.part(part).data, ey.part(part).data, mining, mine_rng, part)
            loss, parts = hybrid_loss(net, ex, ey, PairIndex.positives_and_negatives(res.partners), cfg.loss, arch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(epoch, b, value)
            net.zero_grad()
            T.backward(loss)
            opt.step(lr)
            sums["total"] += value
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
            mined += res.n_mined
            negs += len(idx)
        val = pairset_loss(net, data.validation, cfg.loss, arch)
        if not np.isfinite(val["total"]):
            raise DivergenceError(epoch, None, val["total"])
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_total=sums["total"] / n_batches,
            train_main=sums["main"] / n_batches,
            train_aux_s=sums["aux_siam"] / n_batches,
            train_aux_a=sums["aux_asym"] / n_batches,
            val_total=val["total"],
            val_main=val["main"],
            val_aux_s=val["aux_siam"],
            val_aux_a=val["aux_asym"],
            mined_fraction=mined / negs if negs else 0.0,
            seconds=time.perf_counter() - t0 if cfg.timing else None,
        )
        tlog.append(rec)
        log.info(
            "epoch %d lr %.4g train %.4f val %.4f (main %.4f) mined %.2f",
            epoch, lr, rec.train_total, rec.val_total, rec.val_main, rec.mined_fraction,
        )
        if on_epoch is not None:
            on_epoch(rec)
        improved, stop = stopper.update(epoch, val["total"])
        if improved:
            best = net.copy()
            tlog.best_epoch = epoch
        if stop:
            tlog.stopped_early = True
            break
    return best, tlog


ABLATION_ARMS = ("siamese", "asymmetric", "hybrid", "hybrid_aux")


def arm_config(cfg: TrainConfig, arch: Arch) -> TrainConfig:
    """``cfg`` switched to one ablation arm; only architecture and loss weights change."""
    arch = Arch(arch)
    aux = 1.0 if arch is Arch.HYBRID_AUX else 0.0
    loss = dataclasses.replace(cfg.loss, aux_weight_siam=aux, aux_weight_asym=aux)
    return dataclasses.replace(cfg, arch=arch, loss=loss)


def ablation_run(
    data: TrainingData,
    arch: Arch,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[HybridNetwork, TrainLog]:
    """Train a freshly initialised network as one ablation arm.

    All arms share the initial parameters, data order and augmentation
    draws for a given ``cfg.seed``.
    """
    arm = arm_config(cfg, arch)
    net = HybridNetwork(cfg.loss.variant)
    init_params(net, cfg.seed, cfg.init_sigma, cfg.init_scheme)
    return train(net, data, arm, on_epoch)
