"""Training-set augmentation and synthetic degradations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .facepatch import patch_rect
from .imagecore import ImageBuffer, LandmarkSet, horizontal_flip, mean_intensity

AUGMENT_ORDER = ("original", "up", "down", "left", "right",
                 "flip-original", "flip-up", "flip-down", "flip-left", "flip-right")

KINDS = ("gaussian-noise", "gaussian-smooth", "posterize", "occlude-nose", "occlude-mouth")
DIFFICULTIES = ("easy", "medium", "hard")

# Implementer-chosen difficulty table; tests enforce that distortion grows with difficulty.
DIFFICULTY_TABLE = {
    "gaussian-noise": {"easy": {"sigma": 0.02}, "medium": {"sigma": 0.05}, "hard": {"sigma": 0.10}},
    "gaussian-smooth": {"easy": {"sigma": 1.0}, "medium": {"sigma": 2.0}, "hard": {"sigma": 4.0}},
    "posterize": {"easy": {"levels": 16}, "medium": {"levels": 8}, "hard": {"levels": 4}},
    "occlude-nose": {d: {"margin": 1.2, "fill": 0.5} for d in DIFFICULTIES},
    "occlude-mouth": {d: {"margin": 1.2, "fill": 0.5} for d in DIFFICULTIES},
}


@dataclass(frozen=True)
class AugmentConfig:
    shift: int = 5

    def check(self, img: ImageBuffer) -> None:
        if self.shift < 1 or self.shift >= min(img.width, img.height):
            raise ValueError(f"shift {self.shift} must be >= 1 and smaller than the "
                             f"{img.width}x{img.height} image")


def translate(img: ImageBuffer, dx: int, dy: int, fill) -> ImageBuffer:
    """Move content by ``(dx, dy)`` pixels; vacated pixels take ``fill`` per channel."""
    h, w = img.height, img.width
    out = np.empty_like(img.pixels)
    out[...] = np.asarray(fill, dtype=np.float64)
    src_y = slice(max(-dy, 0), h - max(dy, 0))
    dst_y = slice(max(dy, 0), h - max(-dy, 0))
    src_x = slice(max(-dx, 0), w - max(dx, 0))
    dst_x = slice(max(dx, 0), w - max(-dx, 0))
    out[dst_y, dst_x] = img.pixels[src_y, src_x]
    return ImageBuffer(out)


def augment_10x(img: ImageBuffer, cfg: AugmentConfig | None = None) -> list[ImageBuffer]:
    """Original, shifts up/down/left/right, then the horizontal flips of those five."""
    cfg = cfg or AugmentConfig()
    cfg.check(img)
    fill = mean_intensity(img)
    s = cfg.shift
    base = [img,
            translate(img, 0, -s, fill),
            translate(img, 0, s, fill),
            translate(img, -s, 0, fill),
            translate(img, s, 0, fill)]
    return base + [horizontal_flip(b) for b in base]


def augment_landmarks(lm: LandmarkSet, width: int, height: int,
                      cfg: AugmentConfig | None = None) -> list[LandmarkSet]:
    """Landmarks matching each ``augment_10x`` output, clipped to the image."""
    s = (cfg or AugmentConfig()).shift
    base = [lm, lm.translated(0, -s), lm.translated(0, s), lm.translated(-s, 0), lm.translated(s, 0)]
    base = [b.clipped(width, height) for b in base]
    return base + [b.mirrored(width) for b in base]


@dataclass(frozen=True)
class DegradeSpec:
    kind: str
    difficulty: str = "medium"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; choose from {KINDS}")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        merged = {**difficulty_params(self.kind, self.difficulty), **self.params}
        if merged.get("sigma", 0) < 0:
            raise ValueError("sigma must be >= 0")
        if "levels" in merged and merged["levels"] < 2:
            raise ValueError("posterize needs at least 2 levels")
        object.__setattr__(self, "params", merged)


def difficulty_params(kind: str, difficulty: str) -> dict:
    try:
        return dict(DIFFICULTY_TABLE[kind][difficulty])
    except KeyError:
        raise ValueError(f"no parameters for ({kind!r}, {difficulty!r})") from None


def posterize(arr: np.ndarray, levels: int) -> np.ndarray:
    """Uniform quantization to ``levels`` bins, each mapped to its midpoint."""
    q = np.minimum(np.floor(arr * levels), levels - 1)
    return (q + 0.5) / levels


def occlusion_mask(lm: LandmarkSet, group: str, width: int, height: int,
                   margin: float = 1.2) -> np.ndarray:
    return patch_rect(lm.group(group), margin).pixel_mask(width, height)


def degrade(img: ImageBuffer, spec: DegradeSpec, landmarks: LandmarkSet | None = None) -> ImageBuffer:
    p = spec.params
    if spec.kind == "gaussian-noise":
        if p["sigma"] == 0:
            return img
        rng = np.random.default_rng(spec.seed)
        return ImageBuffer.clamped(img.pixels + rng.normal(0.0, p["sigma"], img.shape))
    if spec.kind == "gaussian-smooth":
        if p["sigma"] == 0:
            return img
        out = ndimage.gaussian_filter(img.pixels, sigma=(p["sigma"], p["sigma"], 0), mode="nearest")
        return ImageBuffer.clamped(out)
    if spec.kind == "posterize":
        return ImageBuffer(posterize(img.pixels, int(p["levels"])))
    if landmarks is None:
        raise ValueError(f"{spec.kind} needs facial landmarks")
    group = "nose" if spec.kind == "occlude-nose" else "mouth"
    out = img.copy_pixels()
    out[occlusion_mask(landmarks, group, img.width, img.height, p["margin"])] = p["fill"]
    return ImageBuffer(out)
