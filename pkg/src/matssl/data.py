"""Micrograph records, netpbm I/O, sliding-window patches, splits and a synthetic generator."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

SPLITS = ("train", "val", "test", "unlabeled")


class ParseError(ValueError):
    """Malformed netpbm or manifest input; ``offset`` is the byte (or line) position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # uint8, [H, W, C]
    mask: np.ndarray | None = None  # class index per pixel, [H, W]
    num_classes: int | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"{self.id}: pixels must be [H,W,1|3], got {px.shape}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)
        if self.mask is not None:
            m = np.ascontiguousarray(self.mask, dtype=np.uint8)
            if m.shape != px.shape[:2]:
                raise ValueError(f"{self.id}: mask shape {m.shape} != image shape {px.shape[:2]}")
            if self.num_classes is not None and m.size and m.max() >= self.num_classes:
                raise ValueError(f"{self.id}: mask value {m.max()} >= num_classes {self.num_classes}")
            self.mask = m

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


# ---------------------------------------------------------------------------
# netpbm


def _read_header(buf: bytes) -> tuple[str, int, int, int, int]:
    tokens: list[str] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ParseError("header ended early", pos)
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos].decode("ascii", errors="replace")
        if not tokens:
            if tok not in ("P5", "P6"):
                raise ParseError(f"unsupported magic {tok!r}", start)
        elif not tok.isdigit():
            raise ParseError(f"expected a decimal number, got {tok!r}", start)
        tokens.append(tok)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if width < 1 or height < 1:
        raise ParseError(f"bad dimensions {width}x{height}", pos)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} (only 255)", pos)
    return magic, width, height, maxval, pos + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 bytes into a uint8 [H, W, C] array."""
    magic, width, height, _, start = _read_header(buf)
    channels = 1 if magic == "P5" else 3
    need = width * height * channels
    have = len(buf) - start
    if have < need:
        raise ParseError(f"truncated payload: header promises {need} bytes, found {have}", start + have)
    return np.frombuffer(buf, np.uint8, need, start).reshape(height, width, channels).copy()


def encode_netpbm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    magic = {1: "P5", 3: "P6"}[c]
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def load_image(path: str | os.PathLike, mask_path: str | os.PathLike | None = None,
               num_classes: int | None = None) -> ImageRecord:
    pixels = decode_netpbm(Path(path).read_bytes())
    mask = None
    if mask_path is not None:
        m = decode_netpbm(Path(mask_path).read_bytes())
        if m.shape[2] != 1:
            raise ValueError(f"{mask_path}: masks must be single-channel P5")
        mask = m[:, :, 0]
    return ImageRecord(Path(path).stem, pixels, mask, num_classes)


def save_image(record: ImageRecord, path: str | os.PathLike,
               mask_path: str | os.PathLike | None = None) -> None:
    Path(path).write_bytes(encode_netpbm(record.pixels))
    if mask_path is not None:
        if record.mask is None:
            raise ValueError(f"{record.id} has no mask to save")
        Path(mask_path).write_bytes(encode_netpbm(record.mask))


def mask_name(image_id: str) -> str:
    """``img_0007`` -> ``mask_0007``; other ids get a ``mask_`` prefix."""
    return "mask_" + image_id[4:] if image_id.startswith("img_") else "mask_" + image_id


def load_directory(directory: str | os.PathLike, num_classes: int | None = None) -> list[ImageRecord]:
    """Load every ``img_*.pgm``/``.ppm`` in ``directory`` with its mask when present."""
    directory = Path(directory)
    records = []
    for path in sorted(directory.glob("img_*.p[gp]m")):
        mpath = directory / f"{mask_name(path.stem)}.pgm"
        records.append(load_image(path, mpath if mpath.exists() else None, num_classes))
    return records


# ---------------------------------------------------------------------------
# patches


class Window(NamedTuple):
    x: int
    y: int
    size: int


def window_origins(dim: int, patch_size: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch_size + 1, stride))
    if origins[-1] != dim - patch_size:
        origins.append(dim - patch_size)
    return origins


def patch_stride(patch_size: int, overlap: float) -> int:
    # small epsilon: 10 * (1 - 0.9) is 0.999... in binary floating point
    return max(1, math.floor(patch_size * (1.0 - overlap) + 1e-9))


def patchify(image: ImageRecord, patch_size: int, overlap: float) -> list[Window]:
    """Row-major sliding windows; a final window is clamped to the far edge when needed."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if patch_size < 1:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    if patch_size > image.width:
        raise ValueError(f"{image.id}: patch {patch_size} wider than image width {image.width} (x axis)")
    if patch_size > image.height:
        raise ValueError(f"{image.id}: patch {patch_size} taller than image height {image.height} (y axis)")
    stride = patch_stride(patch_size, overlap)
    xs = window_origins(image.width, patch_size, stride)
    ys = window_origins(image.height, patch_size, stride)
    return [Window(x, y, patch_size) for y in ys for x in xs]


def crop(image: ImageRecord, window: Window) -> ImageRecord:
    x, y, s = window
    if x < 0 or y < 0 or x + s > image.width or y + s > image.height:
        raise ValueError(f"{image.id}: window {window} outside {image.width}x{image.height}")
    mask = None if image.mask is None else image.mask[y:y + s, x:x + s]
    return ImageRecord(f"{image.id}@{x},{y}", image.pixels[y:y + s, x:x + s], mask, image.num_classes)


@dataclass(frozen=True)
class PatchEntry:
    image_id: str
    x: int
    y: int
    patch_size: int
    split: str

    @property
    def window(self) -> Window:
        return Window(self.x, self.y, self.patch_size)


@dataclass
class PatchDataset:
    entries: list[PatchEntry]
    patch_size: int
    overlap: float = 0.0

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split tag {e.split!r}")
            key = (e.image_id, e.x, e.y)
            if key in seen:
                raise ValueError(f"duplicate patch entry {key}")
            seen.add(key)

    def split(self, tag: str) -> list[PatchEntry]:
        return [e for e in self.entries if e.split == tag]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out

    def check_bounds(self, images: dict[str, ImageRecord]) -> None:
        for e in self.entries:
            img = images[e.image_id]
            if e.x + e.patch_size > img.width or e.y + e.patch_size > img.height:
                raise ValueError(f"entry {e} exceeds image {img.width}x{img.height}")

    def to_manifest(self) -> str:
        return "".join(f"{e.image_id}\t{e.x}\t{e.y}\t{e.patch_size}\t{e.split}\n" for e in self.entries)

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_manifest().encode("utf-8"))

    @classmethod
    def from_manifest(cls, text: str, overlap: float = 0.0) -> "PatchDataset":
        entries = []
        for lineno, line in enumerate(text.split("\n"), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ParseError(f"manifest line {lineno}: expected 5 tab-separated fields", lineno)
            try:
                entries.append(PatchEntry(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]))
            except ValueError as exc:
                raise ParseError(f"manifest line {lineno}: {exc}", lineno) from None
        size = entries[0].patch_size if entries else 0
        return cls(entries, size, overlap)

    @classmethod
    def read(cls, path: str | os.PathLike, overlap: float = 0.0) -> "PatchDataset":
        return cls.from_manifest(Path(path).read_bytes().decode("utf-8"), overlap)


def split_dataset(images: Sequence[ImageRecord], ratio: float, seed: int,
                  holdout: str = "test") -> dict[str, str]:
    """Assign whole source images to ``train`` or ``holdout``.

    Depends only on ``seed`` and the set of image ids, never on input order.
    """
    if not images:
        raise ValueError("split_dataset needs at least one image")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = sorted(img.id for img in images)
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    n_train = math.floor(ratio * len(ids) + 0.5)
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: ("train" if rank < n_train else holdout) for rank, j in enumerate(order)}


def carve_validation(assignment: Mapping[str, str], ratio: float, seed: int) -> dict[str, str]:
    """Move ``floor(ratio * n_train + 0.5)`` of the train images to ``val``, keyed like split_dataset."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"validation ratio must lie in [0, 1), got {ratio}")
    train = sorted(k for k, v in assignment.items() if v == "train")
    n_val = math.floor(ratio * len(train) + 0.5)
    order = np.random.default_rng([seed, 0x56414C]).permutation(len(train))
    out = dict(assignment)
    for j in order[:n_val]:
        out[train[j]] = "val"
    return out


def build_patch_dataset(images: Iterable[ImageRecord], patch_size: int, overlap: float,
                        assignment: dict[str, str] | str) -> PatchDataset:
    """Patchify every image; ``assignment`` is an id->split map or one tag for all."""
    entries = []
    for img in images:
        tag = assignment if isinstance(assignment, str) else assignment[img.id]
        entries.extend(PatchEntry(img.id, w.x, w.y, w.size, tag) for w in patchify(img, patch_size, overlap))
    return PatchDataset(entries, patch_size, overlap)


def materialize(dataset: PatchDataset, images: Mapping[str, ImageRecord] | Sequence[ImageRecord],
                splits: Iterable[str]) -> list[ImageRecord]:
    """Crop the manifest entries of the given splits out of their source images."""
    if not isinstance(images, Mapping):
        images = {img.id: img for img in images}
    wanted = set(splits)
    out = []
    for e in dataset.entries:
        if e.split not in wanted:
            continue
        if e.image_id not in images:
            raise ValueError(f"manifest references unknown image {e.image_id!r}")
        out.append(crop(images[e.image_id], e.window))
    return out


# ---------------------------------------------------------------------------
# synthetic micrographs


@dataclass
class SyntheticSpec:
    seed: int = 0
    grain_count: int = 16
    phase_count: int = 2
    noise_std: float = 8.0
    stripe_phase: int | None = None
    stripe_period: int = 6
    stripe_contrast: int = 50
    intensities: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.phase_count < 2:
            raise ValueError(f"phase_count must be >= 2, got {self.phase_count}")
        if self.grain_count < self.phase_count:
            raise ValueError(f"grain_count ({self.grain_count}) must be >= phase_count ({self.phase_count})")
        if self.stripe_phase is not None and not 0 <= self.stripe_phase < self.phase_count:
            raise ValueError(f"stripe_phase {self.stripe_phase} outside [0, {self.phase_count})")
        if self.stripe_period < 2:
            raise ValueError("stripe_period must be >= 2 pixels")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        levels = self.base_intensities()
        if len(levels) != self.phase_count or len(set(levels)) != len(levels):
            raise ValueError(f"need {self.phase_count} distinct intensities, got {levels}")
        if self.stripe_phase is not None and self.stripe_intensity() in levels:
            raise ValueError("stripe intensity collides with a phase base intensity")

    def base_intensities(self) -> tuple[int, ...]:
        if self.intensities is not None:
            return tuple(int(v) for v in self.intensities)
        return tuple(int(round(v)) for v in np.linspace(70, 180, self.phase_count))

    def stripe_intensity(self) -> int:
        base = self.base_intensities()[self.stripe_phase]
        return int(np.clip(base + self.stripe_contrast, 0, 255))


def _synthetic_one(spec: SyntheticSpec, width: int, height: int, index: int) -> ImageRecord:
    rng = np.random.default_rng([spec.seed, index])
    g, p = spec.grain_count, spec.phase_count
    if g > width * height:
        raise ValueError("more grains than pixels")
    flat = rng.choice(width * height, size=g, replace=False)
    sy, sx = np.divmod(flat, width)
    phases = np.concatenate([np.arange(p), rng.integers(0, p, g - p)])
    angles = rng.uniform(0.0, np.pi, g)

    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[:, :, None] - sy) ** 2 + (xx[:, :, None] - sx) ** 2
    grain = d2.argmin(axis=2)
    mask = phases[grain].astype(np.uint8)

    levels = np.array(spec.base_intensities(), np.float64)
    img = levels[mask]
    if spec.stripe_phase is not None:
        theta = angles[grain]
        u = xx * np.cos(theta) + yy * np.sin(theta)
        on = (np.floor(u / (spec.stripe_period / 2.0)) % 2 == 1) & (mask == spec.stripe_phase)
        img = np.where(on, spec.stripe_intensity(), img)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ImageRecord(f"img_{index:04d}", pixels, mask, p)


def generate_synthetic(spec: SyntheticSpec, width: int, height: int, count: int,
                       start: int = 0) -> list[ImageRecord]:
    """Voronoi-grain micrographs with per-pixel phase masks.

    Image ``i`` depends only on ``(spec, i)``, so any index range can be
    regenerated independently.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    return [_synthetic_one(spec, width, height, i) for i in range(start, start + count)]


def dominant_phase(mask: np.ndarray) -> int:
    return int(np.bincount(mask.reshape(-1)).argmax())
