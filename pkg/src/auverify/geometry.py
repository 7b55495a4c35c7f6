"""Facial landmarks to per-Action-Unit bounding boxes and masks.

Landmarks follow the 68-point Multi-PIE indexing: jaw 0-16, brows 17-26,
nose 27-35, eyes 36-47, mouth 48-67. Each Action Unit maps to a landmark
subset whose min/max extent, grown by a margin and optionally extended
toward the chin, becomes an axis-aligned inclusive-pixel box.

The shipped default mapping (data/au_boxes_default.json) places each box
over the muscle region the unit moves; it is a documented stand-in and
fully overridable through a user config file.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DegenerateBoxError, LandmarkError, UnknownActionUnitError
from .tensor import Tensor

N_LANDMARKS = 68
CHIN_INDEX = 8  # jaw bottom; target of downward box extension

PAIN_AUS = ("AU04", "AU06", "AU07", "AU09", "AU10", "AU25", "AU26", "AU27")


def normalize_au(au) -> str:
    """Canonical AU identifier: 'AU' + two-digit number ('4' -> 'AU04')."""
    s = str(au).strip().upper()
    m = re.fullmatch(r"(?:AU)?0*(\d+)", s)
    if not m:
        raise UnknownActionUnitError(f"cannot parse Action Unit identifier {au!r}")
    return f"AU{int(m.group(1)):02d}"


@dataclass(frozen=True)
class LandmarkSet:
    """Exactly 68 (x, y) points in pixel coordinates of the face crop."""

    points: np.ndarray                      # [68, 2] float
    out_of_bounds: tuple[int, ...] = ()     # flagged but retained

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(points=self.points + np.array([dx, dy]),
                           out_of_bounds=self.out_of_bounds)


def validate_landmarks(points, image_dims) -> LandmarkSet:
    """Enforce landmark invariants; out-of-bounds points are kept but flagged."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise LandmarkError(
            f"expected {N_LANDMARKS} (x, y) landmarks, got array of shape {pts.shape}")
    bad = [i for i in range(N_LANDMARKS) if not np.all(np.isfinite(pts[i]))]
    if bad:
        raise LandmarkError(f"non-finite landmark coordinates at indices {bad}")
    h, w = image_dims
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1)
              & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))
    if not inside.any():
        raise LandmarkError("no landmark lies inside the image bounds")
    flagged = tuple(int(i) for i in np.nonzero(~inside)[0])
    return LandmarkSet(points=pts, out_of_bounds=flagged)


@dataclass(frozen=True)
class AuRegion:
    landmarks: tuple[int, ...]
    margin: int = 4
    extend_down_frac: float = 0.0


@dataclass
class AuBoxConfig:
    """Per-AU landmark subsets used to build boxes."""

    regions: dict[str, AuRegion] = field(default_factory=dict)

    def region(self, au: str) -> AuRegion:
        key = normalize_au(au)
        if key not in self.regions:
            raise UnknownActionUnitError(
                f"no box region configured for {key}; configured: {sorted(self.regions)}")
        return self.regions[key]

    @classmethod
    def from_dict(cls, doc: dict) -> "AuBoxConfig":
        regions = {}
        for au, entry in doc.items():
            idxs = tuple(int(i) for i in entry["landmarks"])
            out_of_range = [i for i in idxs if not 0 <= i < N_LANDMARKS]
            if out_of_range:
                raise LandmarkError(
                    f"{au}: landmark indices out of range [0, {N_LANDMARKS - 1}]: {out_of_range}")
            margin = int(entry.get("margin", 4))
            if margin < 0:
                raise LandmarkError(f"{au}: margin must be non-negative, got {margin}")
            regions[normalize_au(au)] = AuRegion(
                landmarks=idxs, margin=margin,
                extend_down_frac=float(entry.get("extend_down_frac", 0.0)))
        return cls(regions=regions)

    @classmethod
    def load(cls, path) -> "AuBoxConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "AuBoxConfig":
        raw = resources.files("auverify").joinpath("data/au_boxes_default.json")
        cfg = cls.from_dict(json.loads(raw.read_text(encoding="utf-8")))
        missing = [au for au in PAIN_AUS if au not in cfg.regions]
        if missing:  # pragma: no cover - shipped file covers all pain AUs
            raise LandmarkError(f"default box config misses pain AUs: {missing}")
        return cfg


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def area_fraction(self, image_dims) -> float:
        h, w = image_dims
        return self.area / float(h * w)


def au_bounding_box(landmarks: LandmarkSet, au, config: AuBoxConfig,
                    image_dims) -> BoundingBox:
    """Min/max box over the configured landmark subset, grown and clipped.

    Raises DegenerateBoxError when the clipped box has no area (e.g. the
    whole landmark cluster sits outside the image).
    """
    key = normalize_au(au)
    region = config.region(key)
    h, w = image_dims
    pts = landmarks.points[list(region.landmarks)]
    x_min = math.floor(pts[:, 0].min())
    x_max = math.ceil(pts[:, 0].max())
    y_min = math.floor(pts[:, 1].min())
    y_max = math.ceil(pts[:, 1].max())
    if region.extend_down_frac > 0.0:
        chin_y = float(landmarks.points[CHIN_INDEX, 1])
        y_max = math.ceil(y_max + region.extend_down_frac * max(0.0, chin_y - y_max))
    m = region.margin
    x_min, y_min, x_max, y_max = x_min - m, y_min - m, x_max + m, y_max + m
    if x_max < 0 or y_max < 0 or x_min > w - 1 or y_min > h - 1:
        raise DegenerateBoxError(
            key, landmarks,
            f"{key}: box ({x_min},{y_min},{x_max},{y_max}) lies entirely outside "
            f"the {h}x{w} image")
    box = BoundingBox(x_min=max(x_min, 0), y_min=max(y_min, 0),
                      x_max=min(x_max, w - 1), y_max=min(y_max, h - 1))
    if box.area <= 0:  # pragma: no cover - outside-image case caught above
        raise DegenerateBoxError(key, landmarks, f"{key}: degenerate box {box}")
    return box


def box_mask(box: BoundingBox, image_dims) -> Tensor:
    """Binary H x W mask, 1 inside the inclusive box."""
    h, w = image_dims
    mask = np.zeros((h, w), dtype=np.float32)
    mask[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = 1.0
    return Tensor(mask)
