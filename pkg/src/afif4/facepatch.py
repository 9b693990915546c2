"""Face detection orchestration and landmark-driven patch extraction."""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .illum import GaussianSurround, ssr_enhance
from .imagecore import (
    N_LANDMARKS,
    ImageBuffer,
    LandmarkSet,
    Rect,
    crop_resize,
    mean_intensity,
    save_image,
)

PATCH_GROUPS = ("left-eye", "right-eye", "nose", "mouth")
MIN_PATCH_BOX = 8.0
DEFAULT_MARGIN = 1.5


@dataclass(frozen=True)
class FaceDetection:
    landmarks: LandmarkSet
    face_rect: Rect
    fit_score: float = 0.0

    def __post_init__(self):
        r = self.face_rect
        pts = self.landmarks.points
        inside = ((pts[:, 0] >= r.x0) & (pts[:, 0] <= r.x1)
                  & (pts[:, 1] >= r.y0) & (pts[:, 1] <= r.y1))
        if not np.all(inside):
            raise ValueError("face rectangle must contain all 17 landmarks")

    @classmethod
    def from_landmarks(cls, landmarks: LandmarkSet, pad: float = 0.0,
                       fit_score: float = 1.0) -> "FaceDetection":
        box = landmarks.bounding_rect()
        return cls(landmarks, Rect(box.x0 - pad, box.y0 - pad, box.x1 + pad, box.y1 + pad), fit_score)


# A detector returns the single best face in an image, or None.
DetectorPort = Callable[[ImageBuffer], Optional[FaceDetection]]


@dataclass(frozen=True, eq=False)
class PatchSet:
    left_eye: ImageBuffer
    right_eye: ImageBuffer
    nose: ImageBuffer
    mouth: ImageBuffer
    detection: FaceDetection

    def __post_init__(self):
        shapes = {p.shape for p in self.patches()}
        if len(shapes) != 1:
            raise ValueError(f"patches must share dimensions, got {sorted(shapes)}")

    def patches(self) -> tuple[ImageBuffer, ...]:
        return (self.left_eye, self.right_eye, self.nose, self.mouth)

    def by_group(self, group: str) -> ImageBuffer:
        return dict(zip(PATCH_GROUPS, self.patches()))[group]


def _mask_rect(work: np.ndarray, rect: Rect, fill: np.ndarray) -> None:
    mask = rect.pixel_mask(work.shape[1], work.shape[0])
    work[mask] = fill


def detect_all_faces(img: ImageBuffer, detector: DetectorPort, mask_fill=None,
                     max_faces: int = 32, surround: GaussianSurround | None = None,
                     ssr_eps: float = 1 / 255) -> list[FaceDetection]:
    """Detect faces one at a time, painting each found face rectangle before retrying.

    If the detector finds nothing on the original image, the search is repeated
    once on the retinex-enhanced image and continues there.  The SSR image has
    the same geometry, so detections need no coordinate mapping.
    """
    if max_faces < 1:
        raise ValueError(f"max_faces must be >= 1, got {max_faces}")
    source = img
    first = detector(img)
    if first is None:
        source = ssr_enhance(img, surround, ssr_eps)
        first = detector(source)
        if first is None:
            return []
    if mask_fill is None:
        fill = mean_intensity(source)
    else:
        fill = np.broadcast_to(np.asarray(mask_fill, dtype=np.float64), (img.channels,))
    work = source.copy_pixels()
    found = [first]
    _mask_rect(work, first.face_rect, fill)
    while len(found) < max_faces:
        det = detector(ImageBuffer(work))
        if det is None:
            break
        found.append(det)
        _mask_rect(work, det.face_rect, fill)
    return found


def patch_rect(points: np.ndarray, margin: float = DEFAULT_MARGIN,
               min_box: float = MIN_PATCH_BOX) -> Rect:
    """Bounding box of ``points`` scaled about its center; each side is at least ``min_box``."""
    if margin < 1:
        raise ValueError(f"margin must be >= 1, got {margin}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("landmark group is empty")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    cx, cy = (lo + hi) / 2
    half_w = max((hi[0] - lo[0]) / 2 * margin, min_box / 2)
    half_h = max((hi[1] - lo[1]) / 2 * margin, min_box / 2)
    return Rect.from_center(cx, cy, half_w, half_h)


def extract_patch(img: ImageBuffer, lm: LandmarkSet, group: str,
                  margin: float = DEFAULT_MARGIN, out: int = 32) -> ImageBuffer:
    if group not in PATCH_GROUPS:
        raise ValueError(f"patch group must be one of {PATCH_GROUPS}, got {group!r}")
    return crop_resize(img, patch_rect(lm.group(group), margin), out, out)


def extract_patch_set(img: ImageBuffer, det: FaceDetection,
                      margin: float = DEFAULT_MARGIN, out: int = 32) -> PatchSet:
    patches = [extract_patch(img, det.landmarks, g, margin, out) for g in PATCH_GROUPS]
    return PatchSet(*patches, detection=det)


# --------------------------------------------------------------------------
# external detector plug-in


def format_detection_record(det: FaceDetection | None) -> str:
    """One-line record: fit score, face rect (x0 y0 x1 y1), then 17 x,y pairs."""
    if det is None:
        return ""
    vals = [det.fit_score, *det.face_rect.as_tuple(), *det.landmarks.flat()]
    return " ".join(repr(float(v)) for v in vals)


def parse_detection_record(line: str) -> FaceDetection | None:
    toks = line.split()
    if not toks:
        return None
    expected = 1 + 4 + 2 * N_LANDMARKS
    if len(toks) != expected:
        raise ValueError(f"detection record needs {expected} numbers, got {len(toks)}")
    vals = [float(t) for t in toks]
    lm = LandmarkSet(np.reshape(vals[5:], (N_LANDMARKS, 2)))
    return FaceDetection(lm, Rect(*vals[1:5]), vals[0])


class ExternalDetector:
    """Runs ``command <image.png>`` per call and parses one detection record from stdout."""

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def __call__(self, img: ImageBuffer) -> FaceDetection | None:
        fd, path = tempfile.mkstemp(suffix=".png")
        os.close(fd)
        try:
            save_image(img, path)
            proc = subprocess.run([*self.argv, path], capture_output=True, text=True,
                                  timeout=self.timeout, check=True)
        finally:
            os.unlink(path)
        lines = proc.stdout.splitlines()
        return parse_detection_record(lines[0]) if lines else None


class LandmarkDetector:
    """Detector backed by known landmarks (for example from a manifest).

    Fires while its face rectangle still holds image content; once the region
    has been painted a single color it reports nothing, which lets it take part
    in the masking loop.
    """

    def __init__(self, landmarks: LandmarkSet, pad: float = 0.0):
        self.detection = FaceDetection.from_landmarks(landmarks, pad)

    def __call__(self, img: ImageBuffer) -> FaceDetection | None:
        mask = self.detection.face_rect.pixel_mask(img.width, img.height)
        region = img.pixels[mask]
        if region.size == 0 or np.all(region == region[0]):
            return None
        return self.detection
