"""The hybrid patch-matching network.

A weight-sharing (Siamese) branch and a pair of modality-specific
(asymmetric) branches each map a 64x64 patch to a 128-d vector.  Per
modality, the two branch outputs are concatenated and merged by a linear
256 -> 128 layer into the hybrid descriptor.

Two variants exist.  ``l2`` follows the hinge-on-distance branch stack and
unit-normalises every emitted vector; ``softmax`` adds a sixth convolution,
skips normalisation, and carries three 128 -> 2 classifier heads (main,
Siamese auxiliary, asymmetric auxiliary), each applied to the sum of the
two modality vectors.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import PATCH, NormalizationStats
from .tensor import Tensor

DESCRIPTOR_DIM = 128


class Variant(str, enum.Enum):
    L2 = "l2"
    SOFTMAX = "softmax"


class Modality(str, enum.Enum):
    X = "x"
    Y = "y"


class Arch(str, enum.Enum):
    """Which sub-networks produce the matching output."""

    SIAMESE = "siamese"
    ASYMMETRIC = "asymmetric"
    HYBRID = "hybrid"
    HYBRID_AUX = "hybrid_aux"

    @property
    def main_part(self) -> str:
        return {"siamese": "siam", "asymmetric": "asym"}.get(self.value, "hybrid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | fc | unitnorm
    name: str
    out_shape: tuple[int, ...]  # (H, W, C) as listed in the architecture tables
    cin: int = 0
    cout: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0


def _conv(name, hw, cin, cout, k, pad):
    return LayerSpec("conv", name, (hw, hw, cout), cin, cout, k, 1, pad)


def _pool(hw, c):
    return LayerSpec("pool", "pool", (hw, hw, c), kernel=3, stride=2)


L2_LAYERS: tuple[LayerSpec, ...] = (
    _conv("conv0", 64, 1, 32, 5, 2),
    _pool(32, 32),
    _conv("conv1", 32, 32, 64, 5, 2),
    _pool(16, 64),
    _conv("conv2", 16, 64, 128, 3, 1),
    _pool(8, 128),
    _conv("conv3", 6, 128, 256, 3, 0),
    _conv("conv4", 4, 256, 256, 3, 0),
    LayerSpec("fc", "fc", (1, DESCRIPTOR_DIM), 4 * 4 * 256, DESCRIPTOR_DIM),
    LayerSpec("unitnorm", "unitnorm", (1, DESCRIPTOR_DIM)),
)

SOFTMAX_LAYERS: tuple[LayerSpec, ...] = L2_LAYERS[:8] + (
    _conv("conv5", 2, 256, 256, 3, 0),
    LayerSpec("fc", "fc", (1, DESCRIPTOR_DIM), 2 * 2 * 256, DESCRIPTOR_DIM),
)


def layers_for(variant: Variant) -> tuple[LayerSpec, ...]:
    return L2_LAYERS if Variant(variant) is Variant.L2 else SOFTMAX_LAYERS


class Branch:
    """One sub-network: the conv/pool stack followed by a 128-d FC layer."""

    def __init__(self, variant: Variant, prefix: str, dtype=None):
        self.variant = Variant(variant)
        self.prefix = prefix
        self.layers = layers_for(self.variant)
        dtype = dtype or T.get_default_dtype()
        self.params: dict[str, Tensor] = {}
        for spec in self.layers:
            if spec.kind == "conv":
                wshape = (spec.cout, spec.cin, spec.kernel, spec.kernel)
            elif spec.kind == "fc":
                wshape = (spec.cout, spec.cin)
            else:
                continue
            self.params[f"{spec.name}.weight"] = Tensor(np.zeros(wshape, dtype), True, f"{prefix}.{spec.name}.weight")
            self.params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.cout, dtype), True, f"{prefix}.{spec.name}.bias")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for key, t in self.params.items():
            yield f"{self.prefix}.{key}", t

    def __call__(self, x: Tensor, trace: list | None = None) -> Tensor:
        h = x
        for spec in self.layers:
            if spec.kind == "conv":
                h = T.conv2d(h, self.params[f"{spec.name}.weight"], self.params[f"{spec.name}.bias"], spec.stride, spec.pad)
                h = T.relu(h)
            elif spec.kind == "pool":
                h = T.maxpool2d(h, spec.kernel, spec.stride, ceil_mode=True)
            elif spec.kind == "fc":
                h = T.linear(T.flatten(h), self.params["fc.weight"], self.params["fc.bias"])
            else:
                h = T.unit_normalize(h)
            if trace is not None:
                trace.append((spec.name, h.shape))
        return h


class Linear:
    def __init__(self, din: int, dout: int, prefix: str, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.prefix = prefix
        self.weight = Tensor(np.zeros((dout, din), dtype), True, f"{prefix}.weight")
        self.bias = Tensor(np.zeros(dout, dtype), True, f"{prefix}.bias")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield f"{self.prefix}.weight", self.weight
        yield f"{self.prefix}.bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


HEADS = ("main", "siam", "asym")


class HybridNetwork:
    """Parameters of the full hybrid model.

    ``siamese`` is a single :class:`Branch` object used for both modalities,
    so weight sharing is structural.  ``asym_x`` and ``asym_y`` are separate
    objects with separate storage.
    """

    def __init__(self, variant: Variant = Variant.L2, dtype=None, norm: NormalizationStats | None = None):
        self.variant = Variant(variant)
        self.siamese = Branch(self.variant, "siamese", dtype)
        self.asym_x = Branch(self.variant, "asym_x", dtype)
        self.asym_y = Branch(self.variant, "asym_y", dtype)
        self.merge_x = Linear(2 * DESCRIPTOR_DIM, DESCRIPTOR_DIM, "merge_x", dtype)
        self.merge_y = Linear(2 * DESCRIPTOR_DIM, DESCRIPTOR_DIM, "merge_y", dtype)
        self.heads: dict[str, Linear] = {}
        if self.variant is Variant.SOFTMAX:
            self.heads = {h: Linear(DESCRIPTOR_DIM, 2, f"head_{h}", dtype) for h in HEADS}
        self.norm = norm or NormalizationStats.identity()

    @property
    def normalized_output(self) -> bool:
        return self.variant is Variant.L2

    def asym(self, modality: Modality) -> Branch:
        return self.asym_x if Modality(modality) is Modality.X else self.asym_y

    def merge(self, modality: Modality) -> Linear:
        return self.merge_x if Modality(modality) is Modality.X else self.merge_y

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for part in (self.siamese, self.asym_x, self.asym_y, self.merge_x, self.merge_y):
            out.extend(part.named_parameters())
        for h in HEADS:
            if h in self.heads:
                out.extend(self.heads[h].named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "HybridNetwork":
        other = HybridNetwork(self.variant, self.siamese.params["conv0.weight"].dtype, self.norm)
        for (_, dst), (_, src) in zip(other.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        return other

    def load_state(self, other: "HybridNetwork") -> None:
        for (_, dst), (_, src) in zip(self.named_parameters(), other.named_parameters()):
            dst.data = src.data.copy()
        self.norm = other.norm


def parameter_count(layers: tuple[LayerSpec, ...]) -> int:
    total = 0
    for s in layers:
        if s.kind == "conv":
            total += s.cout * s.cin * s.kernel * s.kernel + s.cout
        elif s.kind == "fc":
            total += s.cout * s.cin + s.cout
    return total


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class Encoding:
    """Per-patch vectors for one modality.  Unused parts are ``None``."""

    modality: Modality
    siam: Tensor | None = None
    asym: Tensor | None = None
    hybrid: Tensor | None = None

    def part(self, name: str) -> Tensor:
        t = getattr(self, name)
        if t is None:
            raise ValueError(f"encoding has no {name!r} part")
        return t

    def __len__(self) -> int:
        for t in (self.hybrid, self.siam, self.asym):
            if t is not None:
                return t.shape[0]
        return 0


def encode(net: HybridNetwork, patches, modality: Modality, arch: Arch = Arch.HYBRID) -> Encoding:
    """Run a batch of normalised ``(N, 1, 64, 64)`` patches through the network.

    ``arch`` limits which sub-networks are evaluated: ``siamese`` computes
    only the shared branch, ``asymmetric`` only the modality branch, and the
    hybrid settings compute all three vectors.
    """
    modality = Modality(modality)
    arch = Arch(arch)
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=net.siamese.params["conv0.weight"].dtype))
    if x.data.ndim != 4 or x.shape[1:] != (1, PATCH, PATCH):
        raise T.TensorShapeError(f"encode expects (N, 1, {PATCH}, {PATCH}) patches, got {x.shape}")
    enc = Encoding(modality)
    if arch is not Arch.ASYMMETRIC:
        enc.siam = net.siamese(x)
    if arch is not Arch.SIAMESE:
        enc.asym = net.asym(modality)(x)
    if arch in (Arch.HYBRID, Arch.HYBRID_AUX):
        h = net.merge(modality)(T.concat(enc.siam, enc.asym))
        enc.hybrid = T.unit_normalize(h) if net.normalized_output else h
    return enc


def encode_batched(net: HybridNetwork, patches: np.ndarray, modality: Modality, arch: Arch = Arch.HYBRID, batch: int = 256) -> dict[str, np.ndarray]:
    """Gradient-free encoding of an arbitrarily large stack, in chunks."""
    parts: dict[str, list[np.ndarray]] = {}
    with T.no_grad():
        for s in range(0, len(patches), batch):
            enc = encode(net, patches[s : s + batch], modality, arch)
            for name in ("siam", "asym", "hybrid"):
                t = getattr(enc, name)
                if t is not None:
                    parts.setdefault(name, []).append(t.data)
    return {k: np.concatenate(v) for k, v in parts.items()}


def head_for(net: HybridNetwork, part: str) -> Linear:
    key = {"hybrid": "main", "siam": "siam", "asym": "asym"}[part]
    if key not in net.heads:
        raise ValueError(f"{net.variant.value} network has no classifier head")
    return net.heads[key]


def pair_logits(net: HybridNetwork, ex: Tensor, ey: Tensor, part: str = "hybrid") -> Tensor:
    """Classifier logits on the summed encodings, ``(N, 2)``; column 1 is *match*."""
    return head_for(net, part)(T.add(ex, ey))


def score_pair(net: HybridNetwork, ex: Encoding, ey: Encoding, arch: Arch = Arch.HYBRID) -> np.ndarray:
    """Row-wise similarity of two aligned encoding batches.

    L2 variant: Euclidean distance (lower means more similar).
    Softmax variant: match probability (higher means more similar).
    """
    if Modality(ex.modality) is not Modality.X or Modality(ey.modality) is not Modality.Y:
        raise ValueError("score_pair expects an X encoding and a Y encoding")
    part = Arch(arch).main_part
    a, b = ex.part(part), ey.part(part)
    if net.variant is Variant.L2:
        if net.heads:
            raise ValueError("l2 network unexpectedly carries classifier heads")
        return np.sqrt(np.sum((a.data.astype(np.float64) - b.data) ** 2, axis=1))
    with T.no_grad():
        logits = pair_logits(net, a, b, part).data.astype(np.float64)
    return match_probability(logits)


def match_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of column 1, computed stably as a sigmoid of the logit gap."""
    z = logits[..., 1] - logits[..., 0]
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def score_matrix(net: HybridNetwork, ax: np.ndarray, by: np.ndarray, part: str = "hybrid") -> np.ndarray:
    """All-pairs scores between rows of ``ax`` (M, D) and ``by`` (N, D).

    Returns distances for the L2 variant and match probabilities for the
    Softmax variant.  The Softmax head is linear, so the logits of
    ``head(a_i + b_j)`` decompose as ``W a_i + W b_j + bias``.
    """
    ax = np.asarray(ax, dtype=np.float64)
    by = np.asarray(by, dtype=np.float64)
    if net.variant is Variant.L2:
        d2 = (ax * ax).sum(1)[:, None] + (by * by).sum(1)[None, :] - 2.0 * ax @ by.T
        return np.sqrt(np.maximum(d2, 0.0))
    head = head_for(net, part)
    w = head.weight.data.astype(np.float64)
    la = ax @ w.T + head.bias.data
    lb = by @ w.T
    return match_probability(la[:, None, :] + lb[None, :, :])


def concat_head_logits(net: HybridNetwork, hx: np.ndarray, hy: np.ndarray) -> np.ndarray:
    """Logits of one classifier applied to the stacked ``[H_x; H_y]`` vectors.

    The single FC acting on the 512-d concatenation has the block weight
    ``[FC_x  FC_y]`` and bias ``b_x + b_y``; the head then acts on its output.
    This is the concatenation route that the summed-encoding route must equal.
    """
    fc = np.concatenate([net.merge_x.weight.data, net.merge_y.weight.data], axis=1).astype(np.float64)
    fused = np.concatenate([hx, hy], axis=1) @ fc.T + net.merge_x.bias.data + net.merge_y.bias.data
    head = head_for(net, "hybrid")
    return fused @ head.weight.data.astype(np.float64).T + head.bias.data


# ---------------------------------------------------------------------------
# initialisation and checkpoints
# ---------------------------------------------------------------------------


INIT_SCHEMES = ("normal", "he")


def init_params(net: HybridNetwork, rng_seed: int, sigma: float = 0.01, scheme: str = "normal") -> None:
    """Draw every weight from a zero-mean normal and zero every bias.

    ``scheme="normal"`` uses standard deviation ``sigma`` for all weights;
    ``scheme="he"`` uses ``sqrt(2 / fan_in)`` per layer and ignores
    ``sigma``.  The two asymmetric branches start from identical values, and
    so do the two merge layers.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(rng_seed)

    def fill(named):
        for name, t in named:
            if name.endswith(".bias"):
                t.data = np.zeros(t.shape, t.dtype)
            else:
                std = sigma if scheme == "normal" else np.sqrt(2.0 / np.prod(t.shape[1:]))
                t.data = (rng.standard_normal(t.shape) * std).astype(t.dtype)

    fill(net.siamese.named_parameters())
    fill(net.asym_x.named_parameters())
    for (_, dst), (_, src) in zip(net.asym_y.named_parameters(), net.asym_x.named_parameters()):
        dst.data = src.data.copy()
    fill(net.merge_x.named_parameters())
    # independent merge layers would start the two modalities' hybrid
    # descriptors about sqrt(2) apart, past the hinge margin, where every
    # non-matching pair is inert and training collapses
    for (_, dst), (_, src) in zip(net.merge_y.named_parameters(), net.merge_x.named_parameters()):
        dst.data = src.data.copy()
    for h in HEADS:
        if h in net.heads:
            fill(net.heads[h].named_parameters())


CHECKPOINT_MAGIC = b"HYBN"
CHECKPOINT_VERSION = 1
_VARIANT_CODES = {Variant.L2: 0, Variant.SOFTMAX: 1}


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    pass


class VariantMismatchError(CheckpointError):
    pass


def _shape_table(net: HybridNetwork) -> list[tuple[int, ...]]:
    return [t.shape for t in net.parameters()] + [(4,)]


def export_params(net: HybridNetwork) -> bytes:
    """Serialise a network.

    Layout (little endian): ``b"HYBN" | u16 version | u8 variant | u16 n |
    n x (u8 ndim, ndim x u32) | float32 payload``.  The payload lists every
    parameter in :meth:`HybridNetwork.named_parameters` order followed by the
    four normalisation statistics.
    """
    shapes = _shape_table(net)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<HBH", CHECKPOINT_VERSION, _VARIANT_CODES[net.variant], len(shapes))
    for shp in shapes:
        out += struct.pack(f"<B{len(shp)}I", len(shp), *shp)
    for t in net.parameters():
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    out += net.norm.as_array().astype("<f4").tobytes()
    return bytes(out)


def import_params(blob: bytes, dtype=np.float32) -> HybridNetwork:
    """Inverse of :func:`export_params`."""
    mv = memoryview(blob)
    if len(blob) < 4 or bytes(mv[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"not a network checkpoint (magic {bytes(mv[:4])!r})")
    if len(blob) < 9:
        raise CheckpointTruncatedError("checkpoint header truncated")
    version, vcode, n = struct.unpack_from("<HBH", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    codes = {v: k for k, v in _VARIANT_CODES.items()}
    if vcode not in codes:
        raise VariantMismatchError(f"unknown variant code {vcode}")
    pos = 9
    shapes = []
    for _ in range(n):
        if pos >= len(blob):
            raise CheckpointTruncatedError("checkpoint shape table truncated")
        nd = blob[pos]
        if pos + 1 + 4 * nd > len(blob):
            raise CheckpointTruncatedError("checkpoint shape table truncated")
        shapes.append(struct.unpack_from(f"<{nd}I", blob, pos + 1))
        pos += 1 + 4 * nd

    variant = codes[vcode]
    if shapes != _expected_shapes(variant):
        other = Variant.SOFTMAX if variant is Variant.L2 else Variant.L2
        if shapes == _expected_shapes(other):
            raise VariantMismatchError(
                f"checkpoint is tagged {variant.value!r} but its shape table describes a {other.value!r} network"
            )
        raise ShapeTableError(f"checkpoint shape table does not match a {variant.value!r} network")
    net = HybridNetwork(variant, dtype)

    need = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) - pos < need:
        raise CheckpointTruncatedError(f"checkpoint payload truncated: {len(blob) - pos} of {need} bytes")
    if len(blob) - pos > need:
        raise ShapeTableError(f"checkpoint has {len(blob) - pos - need} trailing bytes")
    for t in net.parameters():
        count = t.size
        t.data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(t.shape).astype(dtype)
        pos += 4 * count
    stats = np.frombuffer(blob, dtype="<f4", count=4, offset=pos).astype(np.float64)
    net.norm = NormalizationStats(*(float(v) for v in stats))
    return net


_SHAPE_CACHE: dict[Variant, list[tuple[int, ...]]] = {}


def _expected_shapes(variant: Variant) -> list[tuple[int, ...]]:
    if variant not in _SHAPE_CACHE:
        _SHAPE_CACHE[variant] = _shape_table(HybridNetwork(variant))
    return _SHAPE_CACHE[variant]


def checkpoint_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(net: HybridNetwork, path) -> bytes:
    blob = export_params(net)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path, dtype=np.float32) -> HybridNetwork:
    with open(path, "rb") as fh:
        return import_params(fh.read(), dtype)
