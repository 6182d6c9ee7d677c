"""Patch-pair datasets: ingestion, lattice extraction, augmentation and a
synthetic multimodal generator.

Patches are stored as 8-bit grayscale and only become real-valued when
:func:`normalize` applies per-modality training statistics.

Container layout (little endian)::

    b"HPMD" | u16 version | u32 count | u16 H | u16 W
    count x ( H*W bytes X | H*W bytes Y | u8 label )
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

PATCH = 64
MATCH = 1
NONMATCH = 0

CONTAINER_MAGIC = b"HPMD"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHIHH")


class ContainerError(ValueError):
    """Base class for malformed patch containers."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    def __init__(self, record: int, message: str):
        super().__init__(message)
        self.record = record


class CountMismatchError(ContainerError):
    pass


@dataclass(eq=False)
class PatchPair:
    """Two co-located patches from different sensors.

    ``x`` and ``y`` are ``(64, 64)`` arrays, uint8 as stored or float32
    after :func:`normalize`.  ``label`` is :data:`MATCH` or :data:`NONMATCH`.
    """

    x: np.ndarray
    y: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self) -> None:
        if self.x.shape != (PATCH, PATCH) or self.y.shape != (PATCH, PATCH):
            raise ValueError(f"patches must be {PATCH}x{PATCH}, got {self.x.shape} and {self.y.shape}")
        if self.label not in (MATCH, NONMATCH):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    def __eq__(self, other) -> bool:
        # provenance is not part of identity
        if not isinstance(other, PatchPair):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class NormalizationStats:
    mean_x: float
    std_x: float
    mean_y: float
    std_y: float

    def __post_init__(self) -> None:
        if not (self.std_x > 0 and self.std_y > 0):
            raise ValueError(
                f"per-modality std must be positive (std_x={self.std_x}, std_y={self.std_y}); "
                "is one modality constant?"
            )

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "NormalizationStats":
        """Pixel statistics per modality over ``pairs`` (the training split)."""
        if not pairs:
            raise ValueError("cannot compute statistics of an empty split")
        xs = np.stack([p.x for p in pairs]).astype(np.float64)
        ys = np.stack([p.y for p in pairs]).astype(np.float64)
        # float32-representable so the values survive a checkpoint round trip
        vals = np.array([xs.mean(), xs.std(), ys.mean(), ys.std()], dtype=np.float32)
        return cls(*(float(v) for v in vals))

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls(0.0, 1.0, 0.0, 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_x, self.std_x, self.mean_y, self.std_y], dtype=np.float64)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint index lists over the positive pairs of a dataset."""

    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    seed: int = 0
    fractions: tuple[float, float, float] = (0.70, 0.10, 0.20)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            tuple(d["train"]),
            tuple(d["validation"]),
            tuple(d["test"]),
            int(d.get("seed", 0)),
            tuple(d.get("fractions", (0.70, 0.10, 0.20))),
        )


def split_indices(n: int, seed: int, fractions=(0.70, 0.10, 0.20)) -> DatasetSplit:
    """Shuffle ``range(n)`` and cut it into train/validation/test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    return DatasetSplit(
        tuple(int(i) for i in np.sort(perm[:n_train])),
        tuple(int(i) for i in np.sort(perm[n_train : n_train + n_val])),
        tuple(int(i) for i in np.sort(perm[n_train + n_val :])),
        seed,
        tuple(float(f) for f in fractions),
    )


def positives_of(pairs: Sequence[PatchPair]) -> list[PatchPair]:
    return [p for p in pairs if p.label == MATCH]


# ---------------------------------------------------------------------------
# extraction, pairing, augmentation, normalisation
# ---------------------------------------------------------------------------


def extract_lattice_pairs(image_x: np.ndarray, image_y: np.ndarray, grid_step: int = 32, tag: str = "") -> list[PatchPair]:
    """Matched pairs at every lattice node whose 64x64 window fits."""
    if image_x.shape != image_y.shape:
        raise ValueError(f"images are not aligned: {image_x.shape} vs {image_y.shape}")
    if grid_step < 1:
        raise ValueError(f"grid_step must be >= 1, got {grid_step}")
    h, w = image_x.shape
    pairs = []
    for r in range(0, h - PATCH + 1, grid_step):
        for c in range(0, w - PATCH + 1, grid_step):
            pairs.append(
                PatchPair(
                    np.array(image_x[r : r + PATCH, c : c + PATCH]),
                    np.array(image_y[r : r + PATCH, c : c + PATCH]),
                    MATCH,
                    f"{tag}@{r},{c}",
                )
            )
    return pairs


def random_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each ``i`` draw ``j != i`` uniformly from ``range(n)``."""
    if n < 2:
        raise ValueError(f"need at least 2 positives to form negatives, got {n}")
    j = rng.integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def make_negatives(positives: Sequence[PatchPair], rng_seed: int) -> list[PatchPair]:
    """Pair each ``x_i`` with the ``y_j`` of a different positive."""
    partners = random_partners(len(positives), np.random.default_rng(rng_seed))
    return [
        PatchPair(positives[i].x, positives[j].y, NONMATCH, f"neg:{i}:{j}")
        for i, j in enumerate(partners.tolist())
    ]


def flip_pair(pair: PatchPair, horizontal: bool, vertical: bool) -> PatchPair:
    x, y = pair.x, pair.y
    if horizontal:
        x, y = x[:, ::-1], y[:, ::-1]
    if vertical:
        x, y = x[::-1, :], y[::-1, :]
    return PatchPair(np.ascontiguousarray(x), np.ascontiguousarray(y), pair.label, pair.source_id)


def augment(pair: PatchPair, rng: np.random.Generator) -> PatchPair:
    """Random horizontal/vertical flips, each with probability 1/2, shared by both patches."""
    h, v = rng.random(2) < 0.5
    return flip_pair(pair, bool(h), bool(v))


def augment_arrays(xs: np.ndarray, ys: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`augment` over ``(N, 64, 64)`` stacks (one flip mask per pair)."""
    masks = rng.random((len(xs), 2)) < 0.5
    xs, ys = xs.copy(), ys.copy()
    h, v = masks[:, 0], masks[:, 1]
    xs[h], ys[h] = xs[h][:, :, ::-1], ys[h][:, :, ::-1]
    xs[v], ys[v] = xs[v][:, ::-1, :], ys[v][:, ::-1, :]
    return xs, ys


def normalize(pair: PatchPair, stats: NormalizationStats) -> PatchPair:
    x = ((pair.x.astype(np.float64) - stats.mean_x) / stats.std_x).astype(np.float32)
    y = ((pair.y.astype(np.float64) - stats.mean_y) / stats.std_y).astype(np.float32)
    return PatchPair(x, y, pair.label, pair.source_id)


def normalize_stack(patches: np.ndarray, mean: float, std: float) -> np.ndarray:
    """``(N, 64, 64)`` patches to a normalised ``(N, 1, 64, 64)`` float32 batch."""
    out = (np.asarray(patches, dtype=np.float32) - np.float32(mean)) / np.float32(std)
    return out[:, None, :, :]


def stack_pairs(pairs: Sequence[PatchPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not pairs:
        empty = np.zeros((0, PATCH, PATCH), dtype=np.uint8)
        return empty, empty.copy(), np.zeros(0, dtype=np.int64)
    xs = np.stack([p.x for p in pairs])
    ys = np.stack([p.y for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return xs, ys, labels


# ---------------------------------------------------------------------------
# synthetic multimodal data
# ---------------------------------------------------------------------------

_SCENE = 160
_CROPS_PER_SCENE = 16


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """A canvas of oriented gratings, Gaussian blobs and step edges in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(rng.integers(2, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.5, 7.0) / PATCH
        phase = rng.uniform(0, 2 * np.pi)
        # gratings fade in and out so that each region has its own texture
        cy, cx = rng.uniform(0, size, 2)
        env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(25, 60) ** 2))
        img += rng.uniform(0.3, 1.0) * env * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(rng.integers(10, 20)):
        cy, cx = rng.uniform(0, size, 2)
        s = rng.uniform(3, 12)
        img += rng.uniform(-1.2, 1.2) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    for _ in range(rng.integers(3, 6)):
        theta = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(-0.4, 0.4) * size
        side = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta) > off
        img += rng.uniform(-0.8, 0.8) * side
    lo, hi = img.min(), img.max()
    return (img - lo) / max(hi - lo, 1e-12)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _sensor_y(base: np.ndarray, rng: np.random.Generator, severity: float, noise: float) -> np.ndarray:
    """Second-sensor appearance: non-monotonic tone curve, half-plane contrast
    reversal and blur, each blended in by ``severity``.

    The reversal mirrors intensities about the patch mean behind a soft
    (3 px) boundary.  Mirroring about mid-grey with a hard boundary instead
    paints a full-range step edge across most tone-folded patches, and that
    random edge swamps the scene content.
    """
    s = float(severity)
    # value-inverting quadratic: dark and bright both map to bright
    img = (1 - s) * base + s * (2.0 * base - 1.0) ** 2
    yy, xx = np.mgrid[0:PATCH, 0:PATCH].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(-0.3, 0.3) * PATCH
    side = (xx - PATCH / 2) * np.cos(theta) + (yy - PATCH / 2) * np.sin(theta) - off
    weight = 0.5 * (1.0 + np.tanh(side / 6.0))
    img = img + s * weight * 2.0 * (img.mean() - img)
    if s > 0:
        img = gaussian_filter(img, sigma=s * 1.0, mode="reflect")
    return img + rng.normal(0, noise, img.shape)


def synth_multimodal(n_pairs: int, rng_seed: int, severity: float = 1.0, noise: float = 0.03) -> list[PatchPair]:
    """Synthetic aligned multimodal pairs: ``n_pairs`` positives then as many negatives.

    Patches are 64x64 crops of larger procedurally generated scenes, so
    crops of the same scene overlap and form naturally hard negatives.
    Modality X is the crop plus noise; modality Y passes the crop through
    :func:`_sensor_y`.
    """
    if n_pairs < 2:
        raise ValueError(f"n_pairs must be >= 2 (negatives need a distinct partner), got {n_pairs}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    rng = np.random.default_rng(rng_seed)
    positives: list[PatchPair] = []
    scene = None
    for i in range(n_pairs):
        if i % _CROPS_PER_SCENE == 0:
            scene = _scene(rng, _SCENE)
        r, c = rng.integers(0, _SCENE - PATCH + 1, 2)
        base = scene[r : r + PATCH, c : c + PATCH]
        x = base + rng.normal(0, noise, base.shape)
        y = _sensor_y(base, rng, severity, noise)
        positives.append(PatchPair(_to_u8(x), _to_u8(y), MATCH, f"synth:{rng_seed}:{i}"))
    negatives = make_negatives(positives, int(rng.integers(2**31)))
    return positives + negatives


def pair_correlations(pairs: Iterable[PatchPair]) -> np.ndarray:
    """Pearson correlation between the X and Y patch of each pair."""
    out = []
    for p in pairs:
        a = p.x.astype(np.float64).ravel()
        b = p.y.astype(np.float64).ravel()
        a -= a.mean()
        b -= b.mean()
        denom = np.sqrt((a * a).sum() * (b * b).sum())
        out.append(float((a * b).sum() / denom) if denom > 0 else 0.0)
    return np.array(out)


# ---------------------------------------------------------------------------
# container and image IO
# ---------------------------------------------------------------------------


def save_container(pairs: Sequence[PatchPair], path) -> None:
    buf = bytearray(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(pairs), PATCH, PATCH))
    for i, p in enumerate(pairs):
        for patch in (p.x, p.y):
            if patch.dtype != np.uint8:
                raise ValueError(f"record {i}: containers store uint8 patches, got {patch.dtype}")
            buf += np.ascontiguousarray(patch).tobytes()
        buf.append(p.label)
    Path(path).write_bytes(bytes(buf))


def load_container(path) -> list[PatchPair]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if not raw.startswith(CONTAINER_MAGIC[: len(raw)]):
            raise BadMagicError(f"{path}: not a patch container")
        raise TruncatedContainerError(0, f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, count, h, w = _HEADER.unpack_from(raw)
    if magic != CONTAINER_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CONTAINER_MAGIC!r}")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(f"{path}: container version {version} not supported")
    if (h, w) != (PATCH, PATCH):
        raise ContainerError(f"{path}: patch size {h}x{w}, expected {PATCH}x{PATCH}")
    rec = 2 * h * w + 1
    body = memoryview(raw)[_HEADER.size :]
    full, extra = divmod(len(body), rec)
    if full < count:
        raise TruncatedContainerError(
            full, f"{path}: truncated in record {full} of {count} ({len(body) - full * rec} of {rec} bytes present)"
        )
    if full > count or extra:
        raise CountMismatchError(f"{path}: header declares {count} records but {len(body)} payload bytes follow")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(count, rec)
    pairs = []
    for i in range(count):
        label = int(arr[i, -1])
        if label not in (MATCH, NONMATCH):
            raise ContainerError(f"{path}: record {i} has label {label}")
        x = arr[i, : h * w].reshape(h, w).copy()
        y = arr[i, h * w : 2 * h * w].reshape(h, w).copy()
        pairs.append(PatchPair(x, y, label, f"{Path(path).name}#{i}"))
    return pairs


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM image."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Rows of ``image_x_path, image_y_path``; relative paths resolve against the manifest."""
    base = Path(path).parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            cells = [c.strip() for c in row]
            if not cells or not any(cells) or cells[0].startswith("#"):
                continue
            if cells[:2] == ["image_x_path", "image_y_path"]:
                continue
            if len(cells) < 2:
                raise ValueError(f"{path}: manifest row needs two paths, got {row}")
            rows.append(tuple((base / c) if not Path(c).is_absolute() else Path(c) for c in cells[:2]))
    return rows
