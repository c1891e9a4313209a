"""Bag records, the DQBG binary format, JSONL manifests, synthetic witness bags and stratified splits.

DQBG layout (all integers little-endian)::

    magic      4 bytes  b"DQBG"
    version    u16
    id_len     u32, then id_len bytes of UTF-8 bag id
    label      u16
    n_sources  u16
    per source:
        width  u32
        n      u32
        values n * width float32, row-major
    has_flags  u8 (0 or 1)
    flags      ceil(n / 8) bytes, packed little-bit-order, present iff has_flags
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .dme import SourceSpec
from .errors import ConfigError, FormatError, SchemaError, StratificationError, VersionError

BAG_MAGIC = b"DQBG"
BAG_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class BagRecord:
    bag_id: str
    label: int
    sources: list  # one (N x C_s) float32 array per source
    flags: Optional[np.ndarray] = None  # witness flags, synthetic data only

    @property
    def n_instances(self):
        return self.sources[0].shape[0]

    def __post_init__(self):
        if not self.sources:
            raise SchemaError(f"bag {self.bag_id!r} has no sources")
        self.sources = [np.ascontiguousarray(s, dtype=np.float32) for s in self.sources]
        n = self.sources[0].shape[0]
        if n < 1:
            raise SchemaError(f"bag {self.bag_id!r} is empty")
        if any(s.ndim != 2 or s.shape[0] != n for s in self.sources):
            raise SchemaError(f"bag {self.bag_id!r}: sources disagree on instance count")
        if self.flags is not None:
            self.flags = np.asarray(self.flags, dtype=bool)
            if self.flags.shape != (n,):
                raise SchemaError(f"bag {self.bag_id!r}: {self.flags.shape[0]} flags for {n} instances")


@dataclass
class Dataset:
    sources: list  # SourceSpec, manifest order
    classes: list
    bags: list
    splits: dict = field(default_factory=dict)  # bag id -> split name

    def subset(self, split):
        return [b for b in self.bags if self.splits.get(b.bag_id) == split]

    @property
    def labels(self):
        return np.array([b.label for b in self.bags])


# ---------------------------------------------------------------------------
# DQBG files
# ---------------------------------------------------------------------------

def encode_bag(record: BagRecord) -> bytes:
    bag_id = record.bag_id.encode("utf-8")
    parts = [BAG_MAGIC, struct.pack("<HI", BAG_VERSION, len(bag_id)), bag_id,
             struct.pack("<HH", record.label, len(record.sources))]
    for src in record.sources:
        n, width = src.shape
        parts.append(struct.pack("<II", width, n))
        parts.append(src.astype("<f4", copy=False).tobytes(order="C"))
    if record.flags is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(np.packbits(record.flags, bitorder="little").tobytes())
    return b"".join(parts)


class ByteReader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_bag(buf: bytes) -> BagRecord:
    r = ByteReader(buf)
    magic = r.take(4, "magic")
    if magic != BAG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != BAG_VERSION:
        raise VersionError(f"unsupported DQBG version {version}; this reader handles version {BAG_VERSION}", 4)
    (id_len,) = r.unpack("<I", "id length")
    try:
        bag_id = r.take(id_len, "bag id").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("bag id is not valid UTF-8", r.pos - id_len) from None
    label, n_sources = r.unpack("<HH", "label and source count")
    sources = []
    for i in range(n_sources):
        width, n = r.unpack("<II", f"source {i} header")
        raw = r.take(4 * width * n, f"source {i} values")
        sources.append(np.frombuffer(raw, dtype="<f4").reshape(n, width).astype(np.float32))
    (has_flags,) = r.unpack("<B", "flag presence byte")
    flags = None
    if has_flags == 1:
        n = sources[0].shape[0] if sources else 0
        packed = np.frombuffer(r.take((n + 7) // 8, "witness flags"), dtype=np.uint8)
        flags = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
    elif has_flags != 0:
        raise FormatError(f"flag presence byte must be 0 or 1, got {has_flags}", r.pos - 1)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after record", r.pos)
    try:
        return BagRecord(bag_id, label, sources, flags)
    except SchemaError as exc:
        raise FormatError(str(exc), r.pos) from None


def write_bag(record: BagRecord, path) -> None:
    Path(path).write_bytes(encode_bag(record))


def read_bag(path) -> BagRecord:
    return decode_bag(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# synthetic witness bags
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_bags: int = 200
    n_min: int = 30
    n_max: int = 80
    source_widths: tuple = (32,)
    witness_rate: float = 0.1
    separation: float = 2.0
    noise: float = 0.5
    num_classes: int = 2
    n_components: int = 4
    seed: int = 7

    def __post_init__(self):
        if not 0.0 < self.witness_rate <= 1.0:
            raise ConfigError(f"witness rate must lie in (0, 1], got {self.witness_rate}")
        if self.separation < 0:
            raise ConfigError(f"separation must be >= 0, got {self.separation}")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if self.num_classes < 2 or self.n_bags < self.num_classes:
            raise ConfigError(f"need num_classes >= 2 and at least one bag per class")
        if not self.source_widths or min(self.source_widths) < 1:
            raise ConfigError("every source needs width >= 1")
        if self.noise <= 0 or self.n_components < 1:
            raise ConfigError("noise must be positive and n_components >= 1")

    def witness_count(self, n):
        count = math.ceil(self.witness_rate * n)
        if count > n:
            raise ConfigError(f"witness count {count} exceeds bag size {n}")
        return count


def _unit(rng, width):
    u = rng.normal(size=width)
    return u / np.linalg.norm(u)


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig(), d_proj: int = 256) -> Dataset:
    """Bags whose label is 0 iff no instance is a witness.

    Background instances come from a per-source Gaussian mixture. A witness of
    class ``k`` is a background draw shifted by ``separation`` along a fixed
    class- and source-specific unit direction, so ``separation = 0`` makes
    witnesses indistinguishable from background.
    """
    rng = nx.make_rng(cfg.seed)
    means = [rng.normal(0.0, 0.5, size=(cfg.n_components, w)) for w in cfg.source_widths]
    shifts = [[cfg.separation * _unit(rng, w) for _ in range(cfg.num_classes)] for w in cfg.source_widths]
    labels = np.arange(cfg.n_bags) % cfg.num_classes
    labels = labels[rng.permutation(cfg.n_bags)]

    bags = []
    for idx, label in enumerate(labels):
        n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
        flags = np.zeros(n, dtype=bool)
        if label > 0:
            flags[rng.choice(n, size=cfg.witness_count(n), replace=False)] = True
        comp = rng.integers(0, cfg.n_components, size=n)
        sources = []
        for s, width in enumerate(cfg.source_widths):
            x = means[s][comp] + cfg.noise * rng.normal(size=(n, width))
            x[flags] += shifts[s][label]
            sources.append(x.astype(np.float32))
        bags.append(BagRecord(f"bag{idx:04d}", int(label), sources, flags))

    specs = [SourceSpec(f"src{s}", w, d_proj) for s, w in enumerate(cfg.source_widths)]
    classes = ["negative", "positive"] if cfg.num_classes == 2 else [f"class{k}" for k in range(cfg.num_classes)]
    return Dataset(specs, classes, bags)


# ---------------------------------------------------------------------------
# stratified splits
# ---------------------------------------------------------------------------

def split(bag_ids: Sequence[str], labels: Sequence[int], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Per-class shuffled partition into train/val/test (or train/test for two ratios)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) not in (2, 3):
        raise ConfigError(f"expected 2 or 3 split ratios, got {ratios}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    names = ("train", "test") if len(ratios) == 2 else SPLITS
    labels = np.asarray(labels)
    rng = nx.make_rng(seed)
    out = {}
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        counts = [int(math.floor(r * members.size + 0.5)) for r in ratios[1:]]
        counts = [members.size - sum(counts)] + counts
        for name, ratio, count in zip(names, ratios, counts):
            if ratio > 0 and count < 1:
                raise StratificationError(f"class {cls} has {members.size} bags, too few for a {name} split")
        if counts[0] < 0:
            raise StratificationError(f"class {cls} has too few bags for ratios {ratios}")
        start = 0
        for name, count in zip(names, counts):
            for i in members[start: start + count]:
                out[bag_ids[i]] = name
            start += count
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write one DQBG file per bag plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format_version": MANIFEST_VERSION,
                         "sources": [s.to_dict() for s in dataset.sources],
                         "classes": list(dataset.classes)}, sort_keys=True)]
    for bag in dataset.bags:
        rel = f"bags/{bag.bag_id}.dqbg"
        write_bag(bag, out_dir / rel)
        lines.append(json.dumps({"id": bag.bag_id, "label": bag.label,
                                 "split": dataset.splits.get(bag.bag_id, "train"),
                                 "paths": [rel]}, sort_keys=True))
    path = out_dir / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or "format_version" not in rows[0]:
        raise SchemaError(f"{path}: first line must be the manifest header")
    header = rows[0]
    if header["format_version"] != MANIFEST_VERSION:
        raise VersionError(f"manifest version {header['format_version']} unsupported; "
                           f"this reader handles version {MANIFEST_VERSION}")
    specs = [SourceSpec(**s) for s in header["sources"]]
    bags, splits = [], {}
    for row in rows[1:]:
        bag_id = row["id"]
        if bag_id in splits:
            raise SchemaError(f"duplicate bag id {bag_id!r} in manifest")
        if row["split"] not in SPLITS:
            raise SchemaError(f"bag {bag_id!r}: unknown split {row['split']!r}")
        if len(row["paths"]) != 1:
            raise SchemaError(f"bag {bag_id!r}: expected one DQBG path, got {len(row['paths'])}")
        file = path.parent / row["paths"][0]
        if not file.exists():
            raise FileNotFoundError(f"bag file {file} referenced by {path} does not exist")
        bag = read_bag(file)
        if bag.bag_id != bag_id or bag.label != row["label"]:
            raise SchemaError(f"bag file {file} disagrees with manifest entry {bag_id!r}")
        for arr, spec in zip(bag.sources, specs):
            if arr.shape[1] != spec.width:
                raise SchemaError(f"bag {bag_id!r}: source {spec.source_id!r} width {arr.shape[1]} != {spec.width}")
        if len(bag.sources) != len(specs):
            raise SchemaError(f"bag {bag_id!r} has {len(bag.sources)} sources, manifest declares {len(specs)}")
        bags.append(bag)
        splits[bag_id] = row["split"]
    return Dataset(specs, header["classes"], bags, splits)

