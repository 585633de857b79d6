"""ModelNet directory indexing, voxel caches, and seeded batch streams."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .checkpoint import atomic_write
from .errors import DataError, FormatError
from .mesh import TriangleMesh, normalize_mesh, random_rotation, read_off, rotate_mesh
from .voxelize import DIMS, voxelize

SPLITS = ("train", "test")

# Published ModelNet-40 split sizes per class (train, test).
MODELNET40_COUNTS = {
    "airplane": (626, 100), "bathtub": (106, 50), "bed": (515, 100), "bench": (173, 20),
    "bookshelf": (572, 100), "bottle": (335, 100), "bowl": (64, 20), "car": (197, 100),
    "chair": (889, 100), "cone": (167, 20), "cup": (79, 20), "curtain": (138, 20),
    "desk": (200, 86), "door": (109, 20), "dresser": (200, 86), "flower_pot": (149, 20),
    "glass_box": (171, 100), "guitar": (155, 100), "keyboard": (145, 20), "lamp": (124, 20),
    "laptop": (149, 20), "mantel": (284, 100), "monitor": (465, 100), "night_stand": (200, 86),
    "person": (88, 20), "piano": (231, 100), "plant": (240, 100), "radio": (104, 20),
    "range_hood": (115, 100), "sink": (128, 20), "sofa": (680, 100), "stairs": (124, 20),
    "stool": (90, 20), "table": (392, 100), "tent": (163, 20), "toilet": (344, 100),
    "tv_stand": (267, 100), "vase": (475, 100), "wardrobe": (87, 20), "xbox": (103, 20),
}


@dataclass(frozen=True)
class Entry:
    path: str
    label: int
    split: str


@dataclass
class DatasetIndex:
    classes: list
    entries: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def split_sizes(self) -> dict:
        return {s: sum(1 for e in self.entries if e.split == s) for s in SPLITS}

    def class_counts(self, split: str) -> dict:
        counts = {c: 0 for c in self.classes}
        for e in self.entries:
            if e.split == split:
                counts[self.classes[e.label]] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "split_sizes": self.split_sizes(),
            "counts": {s: self.class_counts(s) for s in SPLITS},
            "samples": {s: [e.path for e in self.split(s)] for s in SPLITS},
        }


def scan_modelnet(root) -> DatasetIndex:
    """Index a ``<root>/<class>/<split>/<name>.off`` tree.

    Classes are sorted by name; entries are sorted by path within each class.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and any((p / s).is_dir() for s in SPLITS))
    if not classes:
        raise DataError(f"no <class>/<split>/ directories under {root}")
    entries = []
    for label, cls in enumerate(classes):
        for split in SPLITS:
            d = root / cls / split
            if not d.is_dir():
                continue
            for f in sorted(d.glob("*.off")):
                entries.append(Entry(str(f), label, split))
    return DatasetIndex(classes, entries)


def modelnet40_mismatches(index: DatasetIndex) -> list:
    """Differences between ``index`` and the published ModelNet-40 split."""
    problems = []
    if sorted(index.classes) != sorted(MODELNET40_COUNTS):
        problems.append(f"class set differs: {len(index.classes)} classes found")
    for split_pos, split in enumerate(SPLITS):
        have = index.class_counts(split)
        for cls, counts in MODELNET40_COUNTS.items():
            if have.get(cls, 0) != counts[split_pos]:
                problems.append(f"{cls}/{split}: {have.get(cls, 0)} != {counts[split_pos]}")
    return problems


# -- voxel cache ----------------------------------------------------------------

VOXL_MAGIC = b"VOXL"
VOXL_VERSION = 1


def encode_voxel_cache(grids: np.ndarray, labels: Sequence[int]) -> bytes:
    """``VOXL | u32 version | u32 d,h,w | u32 count`` then per sample
    ``u32 class id`` + bit-packed occupancy (LSB-first, ceil(d*h*w/8) bytes)."""
    grids = np.asarray(grids)
    if grids.ndim != 4:
        raise DataError(f"expected (N, d, h, w) grids, got {grids.shape}")
    n, d, h, w = grids.shape
    if len(labels) != n:
        raise DataError(f"{n} grids but {len(labels)} labels")
    parts = [VOXL_MAGIC, struct.pack("<IIIII", VOXL_VERSION, d, h, w, n)]
    for g, y in zip(grids, labels):
        parts.append(struct.pack("<I", int(y)))
        parts.append(np.packbits(g.reshape(-1) != 0, bitorder="little").tobytes())
    return b"".join(parts)


def decode_voxel_cache(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) < 24 or buf[:4] != VOXL_MAGIC:
        raise FormatError("not a VOXL voxel cache", 0)
    version, d, h, w, n = struct.unpack("<IIIII", buf[4:24])
    if version != VOXL_VERSION:
        raise FormatError(f"unsupported voxel cache version {version}", 4)
    nbits = d * h * w
    nbytes = -(-nbits // 8)
    rec = 4 + nbytes
    if len(buf) != 24 + n * rec:
        raise FormatError(f"voxel cache size {len(buf)} != expected {24 + n * rec}", min(len(buf), 24 + n * rec))
    body = np.frombuffer(buf, dtype=np.uint8, offset=24).reshape(n, rec)
    labels = body[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    bits = np.unpackbits(body[:, 4:], axis=1, bitorder="little")[:, :nbits]
    return bits.reshape(n, d, h, w), labels


def write_voxel_cache(path, grids, labels) -> None:
    atomic_write(path, encode_voxel_cache(grids, labels))


def read_voxel_cache(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"voxel cache {path} not found")
    return decode_voxel_cache(path.read_bytes())


# -- in-memory splits and batches -------------------------------------------------

MeshSource = Union[str, Path, TriangleMesh]


@dataclass
class Split:
    """Voxel grids and labels for one split.

    ``meshes`` (paths or meshes, aligned with ``labels``) is only needed for
    rotation augmentation, which re-voxelizes the rotated mesh.
    """

    grids: np.ndarray
    labels: np.ndarray
    meshes: Optional[list] = None
    dims: tuple = DIMS
    _mesh_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.grids is not None:
            self.dims = tuple(self.grids.shape[1:])
        if self.meshes is not None and len(self.meshes) != len(self.labels):
            raise DataError(f"{len(self.meshes)} meshes but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def mesh(self, i: int) -> TriangleMesh:
        if self.meshes is None:
            raise DataError("rotation augmentation needs source meshes for this split")
        if i not in self._mesh_cache:
            src = self.meshes[i]
            m = src if isinstance(src, TriangleMesh) else read_off(src)
            self._mesh_cache[i] = normalize_mesh(m)
        return self._mesh_cache[i]

    def augmented(self, i: int, seed: int, epoch: int) -> np.ndarray:
        rng = sample_rng(seed, epoch, i)
        return voxelize(rotate_mesh(self.mesh(i), random_rotation(rng)), self.dims)


@dataclass
class VoxelDataset:
    classes: list
    splits: dict

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __getitem__(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"dataset has no {name!r} split") from None

    def has(self, name: str) -> bool:
        return name in self.splits and len(self.splits[name]) > 0


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample); order-independent."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 2**31 - 1]).permutation(n)


def batch_iter(
    split: Split,
    batch_size: int,
    *,
    augment: bool = False,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    dtype=np.float32,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, labels)`` with ``x`` shaped (n, 1, d, h, w); the last short
    batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise DataError("cannot iterate an empty split")
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if augment:
            grids = np.stack([split.augmented(int(i), seed, epoch) for i in idx])
        else:
            grids = split.grids[idx]
        yield grids[:, None].astype(dtype), split.labels[idx]


def load_cache_dir(path, with_meshes: bool = True) -> VoxelDataset:
    """Load ``index.json`` plus one ``<split>.voxl`` per split."""
    path = Path(path)
    idx_file = path / "index.json"
    if not idx_file.is_file():
        raise DataError(f"{idx_file} not found; run the voxelize command first")
    meta = json.loads(idx_file.read_text())
    splits = {}
    for s in SPLITS:
        f = path / f"{s}.voxl"
        if not f.is_file():
            continue
        grids, labels = read_voxel_cache(f)
        meshes = meta.get("samples", {}).get(s) if with_meshes else None
        if meshes is not None and len(meshes) != len(labels):
            meshes = None
        splits[s] = Split(grids, labels, meshes)
    if not splits:
        raise DataError(f"no voxel caches under {path}")
    return VoxelDataset(list(meta["classes"]), splits)
