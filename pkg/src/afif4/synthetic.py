"""Procedural two-class "faces" with exact landmarks, for end-to-end checks.

Both classes share geometry and skin/background statistics.  They differ in
hair layout (visible outside the face region, so it survives fogging) and in
the drawing style of eyes, nose and mouth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import (
    FEMALE,
    MALE,
    DatasetManifest,
    ImageBuffer,
    LandmarkSet,
    SampleRecord,
    save_image,
    write_manifest,
)


@dataclass(frozen=True)
class SyntheticFace:
    image: ImageBuffer
    label: int
    landmarks: LandmarkSet


def face_landmarks(cx: float, cy: float, a: float, b: float) -> LandmarkSet:
    """Landmarks for a face centered at ``(cx, cy)`` with half-width ``a``, half-height ``b``."""
    eye_y = cy - 0.25 * b
    return LandmarkSet([
        (cx - a, cy - 0.45 * b), (cx - 0.8 * a, cy + 0.6 * b), (cx, cy + b),
        (cx + 0.8 * a, cy + 0.6 * b), (cx + a, cy - 0.45 * b),
        (cx - 0.67 * a, eye_y), (cx - 0.42 * a, eye_y - 0.04 * b), (cx - 0.17 * a, eye_y),
        (cx + 0.17 * a, eye_y), (cx + 0.42 * a, eye_y - 0.04 * b), (cx + 0.67 * a, eye_y),
        (cx, cy - 0.1 * b), (cx - 0.15 * a, cy + 0.2 * b), (cx + 0.15 * a, cy + 0.2 * b),
        (cx - 0.35 * a, cy + 0.5 * b), (cx, cy + 0.55 * b), (cx + 0.35 * a, cy + 0.5 * b),
    ])


def _ellipse(xs, ys, cx, cy, rx, ry):
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def render_face(rng: np.random.Generator, label: int, size: int = 64) -> SyntheticFace:
    s = size / 64.0
    cx = size / 2 + rng.uniform(-3, 3) * s
    cy = size / 2 + 2 * s + rng.uniform(-3, 3) * s
    a = (16 + rng.uniform(-1.5, 1.5)) * s
    b = (20 + rng.uniform(-1.5, 1.5)) * s
    lm = face_landmarks(cx, cy, a, b)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5

    top, bottom = rng.uniform(0.3, 0.9, 3), rng.uniform(0.3, 0.9, 3)
    t = (ys / size)[:, :, None]
    img = top * (1 - t) + bottom * t

    hair = rng.uniform(0.05, 0.35, 3)
    head = _ellipse(xs, ys, cx, cy - 0.1 * b, 1.15 * a, 1.2 * b)
    if label == MALE:
        mask = head & (ys < cy - 0.45 * b)
    else:
        sides = (np.abs(xs - cx) < 1.45 * a) & (ys > cy - 1.3 * b) & (ys < cy + 0.9 * b)
        mask = (head & (ys < cy - 0.3 * b)) | sides
    img[mask] = hair

    skin = rng.uniform(0.55, 0.85) * np.array([1.0, 0.85, 0.75])
    face = _ellipse(xs, ys, cx, cy, a, b)
    img[face] = skin

    pts = lm.points
    dark = rng.uniform(0.0, 0.2, 3)
    for eye in (pts[5:8], pts[8:11]):
        ex, ey = eye[1]
        half = abs(eye[2, 0] - eye[0, 0]) / 2
        if label == MALE:
            img[(np.abs(xs - ex) <= half) & (np.abs(ys - ey) <= 0.8 * s)] = dark
        else:
            img[_ellipse(xs, ys, ex, ey, 0.7 * half, 0.7 * half)] = dark
            img[_ellipse(xs, ys, ex, ey, 0.3 * half, 0.3 * half)] = rng.uniform(0.7, 1.0, 3)
    if label == MALE:
        img[(np.abs(xs - cx) <= 0.7 * s) & (ys >= pts[11, 1]) & (ys <= pts[12, 1])] = dark
        img[(np.abs(xs - cx) <= 0.38 * a) & (np.abs(ys - pts[15, 1]) <= 0.7 * s)] = dark
    else:
        img[_ellipse(xs, ys, cx, pts[12, 1], 0.12 * a, 0.05 * b)] = dark
        lips = np.array([rng.uniform(0.6, 0.9), rng.uniform(0.1, 0.3), rng.uniform(0.2, 0.4)])
        img[_ellipse(xs, ys, cx, pts[15, 1] - 0.02 * b, 0.36 * a, 0.1 * b)] = lips

    img = img + rng.normal(0.0, 0.03, img.shape)
    return SyntheticFace(ImageBuffer.clamped(img), label, lm)


def generate_faces(n: int, seed: int = 0, size: int = 64,
                   invert_labels: bool = False) -> list[SyntheticFace]:
    """``n`` faces alternating MALE/FEMALE; ``invert_labels`` swaps the recorded labels."""
    rng = np.random.default_rng(seed)
    faces = []
    for i in range(n):
        drawn = MALE if i % 2 == 0 else FEMALE
        face = render_face(rng, drawn, size)
        if invert_labels:
            face = SyntheticFace(face.image, -drawn, face.landmarks)
        faces.append(face)
    return faces


def write_dataset(out_dir, n: int, seed: int = 0, size: int = 64, invert_labels: bool = False,
                  name: str = "synthetic", prefix: str = "face") -> DatasetManifest:
    """Write PNGs plus ``manifest.tsv`` into ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, face in enumerate(generate_faces(n, seed, size, invert_labels)):
        fname = f"{prefix}{i:05d}.png"
        save_image(face.image, out / fname)
        records.append(SampleRecord(fname, face.label, f"{prefix}{i:05d}", None, face.landmarks))
    manifest = DatasetManifest(tuple(records), name, str(out))
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def bar_images(n: int = 64, size: int = 16, seed: int = 0) -> list[tuple[ImageBuffer, int]]:
    """Gray images holding one horizontal (MALE) or vertical (FEMALE) bar at a random spot."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = MALE if i % 2 == 0 else FEMALE
        img = rng.uniform(0.0, 0.2, (size, size))
        length = int(rng.integers(size // 2, size - 1))
        along = int(rng.integers(0, size - length + 1))
        across = int(rng.integers(0, size - 1))
        if label == MALE:
            img[across:across + 2, along:along + length] = rng.uniform(0.7, 1.0)
        else:
            img[along:along + length, across:across + 2] = rng.uniform(0.7, 1.0)
        out.append((ImageBuffer(img), label))
    return out
