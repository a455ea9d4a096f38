"""Dataset ingestion, builtin synthetic datasets, the Dirichlet
non-i.i.d. partitioner, and stratified splitting.

Builtins are procedurally generated and fully determined by their seed:
``gauss-blobs`` (class blobs in the unit square), ``two-spirals``, and
``tiny-digits`` (8x8 ten-class glyphs with jitter and noise). External data
is read from a directory holding IDX-style ``images.idx`` / ``labels.idx``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

BUILTIN_NAMES = ("gauss-blobs", "two-spirals", "tiny-digits")


class DatasetFormatError(ValueError):
    """Malformed dataset files (magic/shape/label violations)."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C), values in [0, 1]
    labels: np.ndarray  # (N,), ints in [0, classes)
    name: str
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N,H,W,C), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError("image/label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetFormatError("label out of range")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetFormatError("image values outside [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              name or self.name, self.classes)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass
class ClientShard:
    """Index view into a parent dataset for one client."""
    client_id: int
    indices: np.ndarray
    histogram: np.ndarray = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError(f"client {self.client_id} has duplicate indices")

    def __len__(self):
        return len(self.indices)


def make_shard(client_id: int, indices, ds: LabeledDataset) -> ClientShard:
    idx = np.asarray(indices, dtype=np.int64)
    hist = np.bincount(ds.labels[idx], minlength=ds.classes)
    return ClientShard(client_id, idx, hist)


# --- builtins ---------------------------------------------------------------

def gauss_blobs(classes: int = 2, n: int = 200, seed: int = 0,
                std: float = 0.08) -> LabeledDataset:
    """Class blobs at fixed angles in the unit square, stored as 1x1x2 images."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B]))
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = 0.5 + 0.28 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(n) % classes
    pts = centers[labels] + rng.normal(scale=std, size=(n, 2))
    pts = np.clip(pts, 0.0, 1.0)
    return LabeledDataset(pts.reshape(n, 1, 1, 2), labels, "gauss-blobs", classes)


def two_spirals(n: int = 400, seed: int = 0, noise: float = 0.03) -> LabeledDataset:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B12A1]))
    half = n // 2
    t = np.sqrt(rng.uniform(0.05, 1.0, size=half)) * 3 * np.pi
    x = np.concatenate([np.cos(t) * t, -np.cos(t) * t]) / (3 * np.pi)
    y = np.concatenate([np.sin(t) * t, -np.sin(t) * t]) / (3 * np.pi)
    pts = np.stack([x, y], axis=1) + rng.normal(scale=noise, size=(2 * half, 2))
    pts = np.clip(0.5 + 0.5 * pts, 0.0, 1.0)
    labels = np.repeat([0, 1], half)
    return LabeledDataset(pts.reshape(-1, 1, 1, 2), labels, "two-spirals", 2)


_GLYPHS = [
    ["..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", ".######.", "........"],
    ["..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".######.", "........"],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", ".#....#.", "..####..", "........"],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", "........"],
    [".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####..", "........"],
]


def _glyph_array(c: int) -> np.ndarray:
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in _GLYPHS[c]])


def tiny_digits(n: int = 1000, seed: int = 0, noise: float = 0.06) -> LabeledDataset:
    """8x8 ten-class digit glyphs with per-sample shift, intensity, and noise."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD161]))
    base = np.stack([_glyph_array(c) for c in range(10)])
    labels = rng.permutation(np.arange(n) % 10)
    images = np.empty((n, 8, 8, 1))
    shifts = rng.integers(-1, 2, size=(n, 2))
    scales = rng.uniform(0.7, 1.0, size=n)
    jitter = rng.normal(scale=noise, size=(n, 8, 8))
    for i in range(n):
        g = base[labels[i]]
        padded = np.zeros((10, 10))
        padded[1:9, 1:9] = g
        dy, dx = shifts[i]
        img = padded[1 + dy:9 + dy, 1 + dx:9 + dx] * scales[i] + jitter[i]
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, "tiny-digits", 10)


_BUILTINS = {
    "gauss-blobs": gauss_blobs,
    "two-spirals": two_spirals,
    "tiny-digits": tiny_digits,
}


def load_dataset(source, **params) -> LabeledDataset:
    """Load a builtin by name (with keyword parameters) or an IDX directory."""
    if isinstance(source, str) and source in _BUILTINS:
        return _BUILTINS[source](**params)
    path = Path(source)
    if not path.is_dir():
        raise DatasetFormatError(
            f"{source!r} is neither a builtin ({', '.join(BUILTIN_NAMES)}) "
            f"nor a dataset directory")
    return read_idx_dataset(path, **params)


# --- IDX-style binary files -------------------------------------------------
# images.idx: u32 BE magic 0x00000803, four u32 BE dims (N,H,W,C), N*H*W*C
# unsigned bytes (scaled to [0,1] on load). labels.idx: u32 BE magic
# 0x00000801, one u32 BE dim, N unsigned bytes.

def write_idx_dataset(dirpath, ds: LabeledDataset) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    with open(dirpath / "images.idx", "wb") as f:
        f.write(struct.pack(">I", IMAGES_MAGIC))
        for s in ds.images.shape:
            f.write(struct.pack(">I", s))
        f.write(np.round(ds.images * 255).astype(np.uint8).tobytes())
    with open(dirpath / "labels.idx", "wb") as f:
        f.write(struct.pack(">I", LABELS_MAGIC))
        f.write(struct.pack(">I", len(ds)))
        f.write(ds.labels.astype(np.uint8).tobytes())


def read_idx_dataset(dirpath, name: str | None = None,
                     classes: int | None = None) -> LabeledDataset:
    dirpath = Path(dirpath)
    with open(dirpath / "images.idx", "rb") as f:
        (magic,) = struct.unpack(">I", f.read(4))
        if magic != IMAGES_MAGIC:
            raise DatasetFormatError(f"bad images magic 0x{magic:08x}")
        dims = struct.unpack(">IIII", f.read(16))
        payload = f.read(int(np.prod(dims)))
        if len(payload) != int(np.prod(dims)):
            raise DatasetFormatError("truncated image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(dims) / 255.0
    with open(dirpath / "labels.idx", "rb") as f:
        (magic,) = struct.unpack(">I", f.read(4))
        if magic != LABELS_MAGIC:
            raise DatasetFormatError(f"bad labels magic 0x{magic:08x}")
        (count,) = struct.unpack(">I", f.read(4))
        labels = np.frombuffer(f.read(count), dtype=np.uint8).astype(np.int64)
    if count != dims[0]:
        raise DatasetFormatError("image/label counts differ")
    n_classes = classes if classes is not None else int(labels.max()) + 1
    return LabeledDataset(images, labels, name or dirpath.name, n_classes)


# --- Dirichlet partitioner --------------------------------------------------

def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing exactly to ``total``."""
    raw = proportions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _partition_once(ds: LabeledDataset, m: int, alpha: float,
                    rng: np.random.Generator) -> list[np.ndarray]:
    assign = [[] for _ in range(m)]
    for c in range(ds.classes):
        idx = ds.class_indices(c)
        if idx.size == 0:
            continue
        g = rng.gamma(alpha, 1.0, size=m)
        if g.sum() <= 0.0:  # extreme-alpha underflow
            g = np.zeros(m)
            g[rng.integers(m)] = 1.0
        counts = _largest_remainder_counts(g / g.sum(), idx.size)
        pos = 0
        for i in range(m):
            assign[i].append(idx[pos:pos + counts[i]])
            pos += counts[i]
    return [np.concatenate(a) if a else np.array([], dtype=np.int64) for a in assign]


def dirichlet_partition(ds: LabeledDataset, m: int, alpha: float,
                        seed: int, max_attempts: int = 100) -> list[ClientShard]:
    """Split per class by Dirichlet(alpha) proportions over clients.

    Every sample lands on exactly one client. Partitions leaving any client
    empty are resampled with seed+1, +2, ... up to ``max_attempts`` times
    (local training is undefined on an empty shard).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if m < 1:
        raise ValueError("client count must be >= 1")
    for attempt in range(max_attempts):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed) + attempt, 0xD17, m]))
        parts = _partition_once(ds, m, alpha, rng)
        if all(p.size > 0 for p in parts):
            return [make_shard(i, p, ds) for i, p in enumerate(parts)]
    raise RuntimeError(
        f"no non-empty partition found in {max_attempts} attempts "
        f"(m={m}, alpha={alpha}, n={len(ds)})")


def save_partition(path, shards: list[ClientShard]) -> None:
    with open(path, "w") as f:
        for shard in shards:
            for idx in shard.indices:
                f.write(f"{shard.client_id},{idx}\n")


def load_partition(path, ds: LabeledDataset) -> list[ClientShard]:
    by_client: dict[int, list[int]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            cid, idx = line.split(",")
            by_client.setdefault(int(cid), []).append(int(idx))
    return [make_shard(cid, by_client[cid], ds) for cid in sorted(by_client)]


# --- stratified splitting ---------------------------------------------------

def stratified_split_indices(labels: np.ndarray, fraction: float,
                             seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; returns (first, second) index arrays."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    labels = np.asarray(labels)
    first, second = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        first.append(idx[:k])
        second.append(idx[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def public_proxy_split(ds: LabeledDataset, fraction: float,
                       seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint stratified split into (proxy, federated) halves."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    a, b = stratified_split_indices(ds.labels, fraction, seed)
    if a.size == 0 or b.size == 0:
        raise ValueError(f"fraction {fraction} leaves an empty side")
    return (ds.subset(a, f"{ds.name}-proxy"), ds.subset(b, f"{ds.name}-fed"))


def heterogeneity_max_share(shards: list[ClientShard]) -> float:
    """Median over clients of the largest class share; larger = more skewed."""
    shares = []
    for s in shards:
        total = s.histogram.sum()
        shares.append(s.histogram.max() / total if total else 0.0)
    return float(np.median(shares))
