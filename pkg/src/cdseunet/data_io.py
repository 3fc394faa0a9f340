"""File formats and datasets: binary PGM, TSV manifests, synthetic lesion
images, cached edge maps and model checkpoints."""

from __future__ import annotations

import io
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .edges import GaussianSpec, HysteresisThresholds, detect
from .errors import ConfigError, LoadError, ParseError
from .model import CdseUnet, ModelConfig

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- PGM


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ConfigError(f"PGM images are 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.size and (img.min() < 0 or img.max() > 255):
            raise ConfigError("PGM pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def parse_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise ParseError(f"not a binary PGM: magic {data[:2]!r}, expected b'P5'", 0)
    pos = 2
    tokens = []
    while len(tokens) < 3:
        start = pos
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                pos += 1
        if pos == start:
            raise ParseError("expected whitespace in PGM header", pos)
        begin = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == begin:
            raise ParseError("expected an integer in PGM header", begin)
        tokens.append((int(data[begin:pos]), begin))
    (w, _), (h, _), (maxval, maxval_at) = tokens
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}; only 255 is accepted", maxval_at)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    if w < 1 or h < 1:
        raise ParseError(f"invalid dimensions {w}x{h}", tokens[0][1])
    need = w * h
    if len(data) - pos < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(data) - pos}", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_pgm(f.read())


def read_mask(path) -> np.ndarray:
    """Binary mask from a PGM: any value above 127 is foreground."""
    return (read_pgm(path) > 127).astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    write_pgm(np.asarray(mask, dtype=np.uint8) * 255, path)


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    mask: str
    edge: Optional[str] = None


@dataclass
class Manifest:
    """Ordered entries whose relative paths resolve against ``root``."""

    entries: List[ManifestEntry]
    root: Path = field(default_factory=Path)
    split_seed: int = 0

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def __len__(self) -> int:
        return len(self.entries)

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            cells = [e.image, e.mask] + ([e.edge] if e.edge else [])
            lines.append("\t".join(cells))
        return "".join(line + "\n" for line in lines)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())


def load_manifest(path, check: bool = True) -> Manifest:
    """Parse a TAB-separated manifest; relative paths are taken from the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"manifest {path} does not exist")
    manifest = Manifest([], root=path.parent)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cells = line.split("\t")
            if len(cells) not in (2, 3):
                raise LoadError(f"{path}:{lineno}: expected 2 or 3 TAB-separated fields, got {len(cells)}")
            manifest.entries.append(ManifestEntry(cells[0], cells[1], cells[2] if len(cells) == 3 else None))
    if check:
        for e in manifest.entries:
            _check_entry(manifest, e)
    return manifest


def _check_entry(manifest: Manifest, e: ManifestEntry) -> None:
    paths = [e.image, e.mask] + ([e.edge] if e.edge else [])
    for rel in paths:
        if not manifest.resolve(rel).exists():
            raise LoadError(f"entry {e.image}: file {rel} is missing")
    shapes = {rel: _pgm_shape(manifest.resolve(rel)) for rel in paths}
    if len(set(shapes.values())) != 1:
        raise LoadError(f"entry {e.image}: dimension mismatch {shapes}")


def _pgm_shape(path: Path) -> tuple:
    try:
        return read_pgm(path).shape
    except ParseError as exc:
        raise LoadError(f"{path}: {exc}") from None


def split(entries: list, train_fraction: float, seed: int) -> Tuple[list, list]:
    """Seeded shuffle, then the first ``round(fraction * n)`` entries train."""
    if not 0 < train_fraction <= 1:
        raise ConfigError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    n = len(entries)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    train = [entries[i] for i in order[:cut]]
    test = [entries[i] for i in order[cut:]]
    if not test:
        warnings.warn("split produced an empty test set", stacklevel=2)
    return train, test


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    count: int = 8
    size: int = 64
    blob_count_range: Tuple[int, int] = (1, 5)
    background: Tuple[float, float] = (15.0, 35.0)
    lung: Tuple[float, float] = (190.0, 220.0)
    lesion: Tuple[float, float] = (100.0, 130.0)
    lesion_edge_px: float = 1.5
    noise_sigma: float = 6.0
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.size < 16 or self.size % 16:
            raise ConfigError(f"size must be a positive multiple of 16, got {self.size}")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"blob_count_range must satisfy 1 <= lo <= hi, got {self.blob_count_range}")
        return self


def _ellipse_radius(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return np.sqrt(u * u + v * v)


def synthesize(spec: SyntheticSpec, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One (image, mask, lung_mask) triple; deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.full((n, n), rng.uniform(*spec.background))
    lungs = np.zeros((n, n), dtype=bool)
    lung_level = rng.uniform(*spec.lung)
    for side in (-1, 1):
        cx = n / 2 + side * n * rng.uniform(0.2, 0.24)
        cy = n / 2 + n * rng.uniform(-0.04, 0.04)
        r = _ellipse_radius(yy, xx, cy, cx, n * rng.uniform(0.3, 0.36), n * rng.uniform(0.15, 0.19), rng.uniform(-0.2, 0.2))
        lungs |= r <= 1.0
    img[lungs] = lung_level

    mask = np.zeros((n, n), dtype=bool)
    blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
    placed = 0
    for _ in range(200 * blobs):
        if placed == blobs:
            break
        ry = n * rng.uniform(0.04, 0.11)
        rx = n * rng.uniform(0.04, 0.11)
        cy, cx = rng.uniform(0, n), rng.uniform(0, n)
        angle = rng.uniform(0, np.pi)
        r = _ellipse_radius(yy, xx, cy, cx, ry, rx, angle)
        # soft band straddles the support boundary; keep all of it inside the lungs
        band = r <= 1.0 + spec.lesion_edge_px / min(rx, ry) + 0.05
        support = r <= 1.0
        if not support.any() or not lungs[band].all():
            continue
        alpha = np.clip(0.5 + (1.0 - r) * min(rx, ry) / (2.0 * spec.lesion_edge_px), 0.0, 1.0)
        level = rng.uniform(*spec.lesion)
        img = img * (1.0 - alpha) + level * alpha
        mask |= support
        placed += 1
    img = img + rng.normal(0.0, spec.noise_sigma, size=(n, n))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8), lungs.astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write ``spec.count`` image/mask PGM pairs plus ``manifest.tsv`` under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.count):
        img, mask, _ = synthesize(spec, i)
        image_rel, mask_rel = f"images/img_{i:04d}.pgm", f"masks/mask_{i:04d}.pgm"
        write_pgm(img, out / image_rel)
        write_mask(mask, out / mask_rel)
        entries.append(ManifestEntry(image_rel, mask_rel))
    manifest = Manifest(entries, root=out, split_seed=spec.seed)
    manifest.save(out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------- edge cache


@dataclass(frozen=True)
class EdgeParams:
    """Edge operator choice plus its parameters (Canny or threshold detectors)."""

    operator: str = "canny"
    sigma: float = 1.4
    radius: int = 2
    low: float = 0.1
    high: float = 0.2
    relative: bool = True
    tfrac: float = 0.2

    def tag(self) -> str:
        if self.operator == "canny":
            mode = "rel" if self.relative else "abs"
            return f"canny_s{self.sigma:g}_r{self.radius}_l{self.low:g}_h{self.high:g}_{mode}"
        return f"{self.operator}_t{self.tfrac:g}"

    def compute(self, img: np.ndarray) -> np.ndarray:
        return detect(img, self.operator, GaussianSpec(self.sigma, self.radius),
                      HysteresisThresholds(self.low, self.high, self.relative), self.tfrac)


def cache_edges(manifest: Manifest, params: EdgeParams = EdgeParams(), cache_dir: str = "edges") -> Tuple[Manifest, int]:
    """Compute and store edge maps for every entry; returns (updated manifest, cache hits).

    A cached file is reused when it exists and is not older than its image.
    """
    (manifest.root / cache_dir).mkdir(parents=True, exist_ok=True)
    hits = 0
    entries = []
    for e in manifest.entries:
        stem = Path(e.image).stem
        rel = f"{cache_dir}/{stem}__{params.tag()}.pgm"
        target, source = manifest.resolve(rel), manifest.resolve(e.image)
        if target.exists() and target.stat().st_mtime_ns >= source.stat().st_mtime_ns:
            hits += 1
        else:
            write_mask(params.compute(read_pgm(source)), target)
        entries.append(replace(e, edge=rel))
    return Manifest(entries, manifest.root, manifest.split_seed), hits


@dataclass
class Sample:
    image: np.ndarray  # float32 in [0, 1]
    edge: np.ndarray  # float32 in {0, 1}
    mask: np.ndarray  # uint8 in {0, 1}
    name: str = ""


def load_samples(manifest: Manifest, params: EdgeParams = EdgeParams(), entries=None) -> List[Sample]:
    """Read images and masks; edges come from the cached path only when it
    was produced with ``params`` (tag in the filename), else are recomputed."""
    samples = []
    for e in entries if entries is not None else manifest.entries:
        raw = read_pgm(manifest.resolve(e.image))
        mask = read_mask(manifest.resolve(e.mask))
        if raw.shape != mask.shape:
            raise LoadError(f"entry {e.image}: image {raw.shape} vs mask {mask.shape}")
        if e.edge and params.tag() in e.edge:
            edge = read_mask(manifest.resolve(e.edge))
        else:
            edge = params.compute(raw)
        image = raw.astype(np.float32) / 255.0
        assert 0.0 <= image.min() and image.max() <= 1.0
        samples.append(Sample(image, edge.astype(np.float32), mask, e.image))
    return samples


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CDSE"
VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_records(model: CdseUnet) -> list:
    """(name, array) pairs in serialization order: parameters, then BN buffers."""
    records = [(name, p.data) for name, p in model.named_parameters()]
    records += list(model.named_buffers())
    return records


def checkpoint_bytes(model: CdseUnet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_str(model.config.to_text()))
    records = checkpoint_records(model)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: CdseUnet, path) -> None:
    data = checkpoint_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError(f"checkpoint truncated at byte {self.pos} (needed {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def model_from_checkpoint_bytes(data: bytes, dtype=np.float32) -> CdseUnet:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise LoadError("not a checkpoint: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_text(r.text())
    except ConfigError as exc:
        raise LoadError(f"checkpoint config: {exc}") from None
    model = CdseUnet(config, seed=0, dtype=dtype)
    targets = {name: p.data for name, p in model.named_parameters()}
    targets.update(dict(model.named_buffers()))
    seen = set()
    for _ in range(r.u32()):
        name = r.text()
        if name not in targets:
            raise LoadError(f"unknown parameter name {name!r}")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        dest = targets[name]
        if shape != dest.shape:
            raise LoadError(f"{name}: stored shape {shape} != model shape {dest.shape}")
        count = int(np.prod(shape, dtype=np.int64))
        dest[...] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        seen.add(name)
    missing = sorted(set(targets) - seen)
    if missing:
        raise LoadError(f"checkpoint lacks {len(missing)} entries, e.g. {missing[0]!r}")
    if r.pos != len(data):
        raise LoadError(f"{len(data) - r.pos} trailing bytes after the last record")
    return model


def load_checkpoint(path, dtype=np.float32) -> CdseUnet:
    with open(path, "rb") as f:
        return model_from_checkpoint_bytes(f.read(), dtype)
