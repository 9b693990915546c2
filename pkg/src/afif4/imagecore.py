"""Image buffers, geometry and dataset manifests shared by the whole pipeline.

Coordinates are continuous: pixel ``(col, row)`` covers ``[col, col+1) x
[row, row+1)`` and its center sits at ``(col + 0.5, row + 0.5)``.  Landmarks,
rectangles and fog regions all live in this frame, so mirroring an image of
width ``W`` maps ``x`` to ``W - x``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

MALE = 1
FEMALE = -1

N_LANDMARKS = 17

# Image-left / image-right (smaller x is "left").
LANDMARK_GROUPS: Mapping[str, tuple[int, ...]] = {
    "face-outline": (0, 1, 2, 3, 4),  # left temple, left jaw, chin, right jaw, right temple
    "left-eye": (5, 6, 7),  # outer corner, center, inner corner
    "right-eye": (8, 9, 10),  # inner corner, center, outer corner
    "nose": (11, 12, 13),  # bridge, left nostril, right nostril
    "mouth": (14, 15, 16),  # left corner, center, right corner
}

# Index permutation that keeps semantic roles under a horizontal mirror.
MIRROR_PERMUTATION: tuple[int, ...] = (
    4, 3, 2, 1, 0,
    10, 9, 8,
    7, 6, 5,
    11, 13, 12,
    16, 15, 14,
)


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded into an ImageBuffer."""


class ManifestError(ValueError):
    """Malformed manifest content; ``line`` is 1-based or None for file-level errors."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Immutable ``(height, width, channels)`` float64 image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected HxW or HxWx{{1,3}} pixels, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("pixels must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]; use ImageBuffer.clamped for raw data")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def clamped(cls, arr) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(np.clip(np.nan_to_num(arr, nan=0.0), 0.0, 1.0))

    @classmethod
    def constant(cls, width: int, height: int, value, channels: int = 1) -> "ImageBuffer":
        fill = np.broadcast_to(np.asarray(value, dtype=np.float64), (channels,))
        return cls(np.broadcast_to(fill, (height, width, channels)).copy())

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def copy_pixels(self) -> np.ndarray:
        """Writable copy of the pixel array."""
        return np.array(self.pixels)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[x0, x1] x [y0, y1]`` in continuous image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"rectangle coordinates must be finite: {vals}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"rectangle has negative extent: {vals}")

    @classmethod
    def from_center(cls, cx: float, cy: float, half_w: float, half_h: float) -> "Rect":
        return cls(cx - half_w, cy - half_h, cx + half_w, cy + half_h)

    @classmethod
    def full(cls, img: ImageBuffer) -> "Rect":
        return cls(0.0, 0.0, float(img.width), float(img.height))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def intersection_area(self, width: float, height: float) -> float:
        w = min(self.x1, width) - max(self.x0, 0.0)
        h = min(self.y1, height) - max(self.y0, 0.0)
        return max(w, 0.0) * max(h, 0.0)

    def iou(self, other: "Rect") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        inter = max(w, 0.0) * max(h, 0.0)
        union = self.width * self.height + other.width * other.height - inter
        return inter / union if union > 0 else 0.0

    def pixel_mask(self, width: int, height: int) -> np.ndarray:
        """Boolean ``(height, width)`` mask of pixels whose centers lie in the rectangle."""
        xs = np.arange(width) + 0.5
        ys = np.arange(height) + 0.5
        col = (xs >= self.x0) & (xs <= self.x1)
        row = (ys >= self.y0) & (ys <= self.y1)
        return row[:, None] & col[None, :]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """The 17 facial points; groups are fixed by ``LANDMARK_GROUPS``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected {N_LANDMARKS} (x, y) landmark points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def groups(self) -> Mapping[str, tuple[int, ...]]:
        return LANDMARK_GROUPS

    def group(self, name: str) -> np.ndarray:
        try:
            idx = LANDMARK_GROUPS[name]
        except KeyError:
            raise KeyError(f"unknown landmark group {name!r}") from None
        return self.points[list(idx)]

    def bounding_rect(self) -> Rect:
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return Rect(lo[0], lo[1], hi[0], hi[1])

    def within(self, width: int, height: int) -> bool:
        x, y = self.points[:, 0], self.points[:, 1]
        return bool(np.all((x >= 0) & (x <= width) & (y >= 0) & (y <= height)))

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]))

    def mirrored(self, width: int) -> "LandmarkSet":
        """Landmarks of the horizontally flipped image, with left/right roles swapped."""
        pts = self.points[list(MIRROR_PERMUTATION)].copy()
        pts[:, 0] = width - pts[:, 0]
        return LandmarkSet(pts)

    def clipped(self, width: int, height: int) -> "LandmarkSet":
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0, width)
        pts[:, 1] = np.clip(pts[:, 1], 0, height)
        return LandmarkSet(pts)

    def flat(self) -> list[float]:
        return [float(v) for v in self.points.reshape(-1)]

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return bool(np.array_equal(self.points, other.points))

    __hash__ = None


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    gender: int
    subject_id: str = ""
    fold: int | None = None
    landmarks: LandmarkSet | None = None

    def __post_init__(self):
        if self.gender not in (MALE, FEMALE):
            raise ValueError(f"gender must be MALE (+1) or FEMALE (-1), got {self.gender!r}")
        if self.fold is not None and self.fold < 0:
            raise ValueError(f"fold id must be >= 0, got {self.fold}")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    name: str = ""
    base_dir: str = "."

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        seen = set()
        for rec in records:
            if rec.image_path in seen:
                raise ManifestError(f"duplicate image path {rec.image_path!r}")
            seen.add(rec.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rec: SampleRecord) -> str:
        if os.path.isabs(rec.image_path):
            return rec.image_path
        return os.path.join(self.base_dir, rec.image_path)

    def check_folds(self, k: int) -> None:
        for rec in self.records:
            if rec.fold is not None and not 0 <= rec.fold < k:
                raise ManifestError(f"{rec.image_path}: fold id {rec.fold} outside [0, {k})")

    def with_records(self, records: Iterable[SampleRecord]) -> "DatasetManifest":
        return DatasetManifest(tuple(records), self.name, self.base_dir)


# --------------------------------------------------------------------------
# image I/O


def load_image(path) -> ImageBuffer:
    """Read a raster file into [0, 1] pixels; gray stays 1-channel, color becomes RGB."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ImageFormatError(f"{path}: zero-dimension image")
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 65535.0 if mode.startswith("I;16") or arr.max() > 255 else 255.0
                arr = arr / scale
            elif mode == "F":
                arr = np.asarray(im, dtype=np.float64)
            elif mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return ImageBuffer.clamped(arr)


def save_image(img: ImageBuffer, path) -> None:
    """Write an 8-bit image; the format follows the file extension."""
    arr = np.rint(img.pixels * 255.0).astype(np.uint8)
    if img.channels == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)


# --------------------------------------------------------------------------
# pixel operations


def horizontal_flip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1, :])


def mean_intensity(img: ImageBuffer) -> np.ndarray:
    """Per-channel arithmetic mean, shape ``(channels,)``."""
    return img.pixels.mean(axis=(0, 1))


def _sample_coords(lo: float, hi: float, n_out: int, n_in: int):
    # Output sample centers mapped back to fractional source indices, clamped to the border.
    centers = lo + (np.arange(n_out) + 0.5) * ((hi - lo) / n_out) - 0.5
    centers = np.clip(centers, 0.0, n_in - 1)
    i0 = np.floor(centers).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = centers - i0
    return i0, i1, frac


def crop_resize(img: ImageBuffer, rect: Rect, out_w: int, out_h: int) -> ImageBuffer:
    """Bilinear resample of ``rect`` to ``out_w x out_h``; outside parts clamp to the border."""
    if out_w <= 0 or out_h <= 0:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    overlaps = (rect.x0 < img.width and rect.x1 > 0 and rect.y0 < img.height and rect.y1 > 0)
    if not overlaps or rect.width <= 0 or rect.height <= 0:
        raise ValueError(f"crop rectangle {rect.as_tuple()} does not intersect the "
                         f"{img.width}x{img.height} image")
    x0, x1, fx = _sample_coords(rect.x0, rect.x1, out_w, img.width)
    y0, y1, fy = _sample_coords(rect.y0, rect.y1, out_h, img.height)
    p = img.pixels
    fx = fx[None, :, None]
    top = p[y0][:, x0] * (1.0 - fx) + p[y0][:, x1] * fx
    bottom = p[y1][:, x0] * (1.0 - fx) + p[y1][:, x1] * fx
    fy = fy[:, None, None]
    return ImageBuffer.clamped(top * (1.0 - fy) + bottom * fy)


def resize(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    return crop_resize(img, Rect.full(img), out_w, out_h)


# --------------------------------------------------------------------------
# manifests


def _parse_fold(tok: str, line_no: int) -> int | None:
    if tok == "-":
        return None
    try:
        fold = int(tok)
    except ValueError:
        raise ManifestError(f"fold id must be an integer or '-', got {tok!r}", line_no) from None
    if fold < 0:
        raise ManifestError(f"fold id must be >= 0, got {fold}", line_no)
    return fold


def parse_manifest_text(text: str, name: str = "", base_dir: str = ".") -> DatasetManifest:
    records = []
    seen: dict[str, int] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            header = line.lstrip()[1:].strip()
            if not records and header.startswith("dataset:"):
                name = header[len("dataset:"):].strip() or name
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise ManifestError(f"expected at least 4 tab-separated fields, got {len(fields)}", line_no)
        path, gender_tok, subject, fold_tok = (f.strip() for f in fields[:4])
        if not path:
            raise ManifestError("empty image path", line_no)
        if gender_tok == "M":
            gender = MALE
        elif gender_tok == "F":
            gender = FEMALE
        else:
            raise ManifestError(f"invalid gender token {gender_tok!r} (expected M or F)", line_no)
        fold = _parse_fold(fold_tok, line_no)
        extra = [f.strip() for f in fields[4:] if f.strip()]
        landmarks = None
        if extra:
            if len(extra) != 2 * N_LANDMARKS:
                raise ManifestError(
                    f"expected {2 * N_LANDMARKS} landmark numbers ({N_LANDMARKS} points), "
                    f"got {len(extra)}", line_no)
            try:
                coords = [float(v) for v in extra]
            except ValueError as exc:
                raise ManifestError(f"bad landmark coordinate: {exc}", line_no) from None
            if not all(math.isfinite(v) for v in coords):
                raise ManifestError("landmark coordinates must be finite", line_no)
            landmarks = LandmarkSet(np.reshape(coords, (N_LANDMARKS, 2)))
        if path in seen:
            raise ManifestError(f"duplicate image path {path!r} (first seen on line {seen[path]})", line_no)
        seen[path] = line_no
        records.append(SampleRecord(path, gender, subject, fold, landmarks))
    return DatasetManifest(tuple(records), name, base_dir)


def parse_manifest(path) -> DatasetManifest:
    """Read a tab-separated manifest; relative image paths resolve against its directory.

    The dataset name comes from a leading ``# dataset: <name>`` comment, else the file stem.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest_text(text, name=path.stem, base_dir=str(path.parent))


def format_record(rec: SampleRecord) -> str:
    fields = [
        rec.image_path,
        "M" if rec.gender == MALE else "F",
        rec.subject_id,
        "-" if rec.fold is None else str(rec.fold),
    ]
    if rec.landmarks is not None:
        fields.extend(repr(v) for v in rec.landmarks.flat())
    return "\t".join(fields)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"# dataset: {manifest.name}"] if manifest.name else []
    lines.extend(format_record(rec) for rec in manifest.records)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def records_by_fold(manifest: DatasetManifest, fold: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Split into (training, testing) records for one fold; unassigned records are skipped."""
    train = [r for r in manifest.records if r.fold is not None and r.fold != fold]
    test = [r for r in manifest.records if r.fold == fold]
    return train, test

