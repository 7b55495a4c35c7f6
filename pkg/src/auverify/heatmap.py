"""Render relevance grids as color images.

Colormaps are explicit 256-entry RGB tables shipped with the package
(not computed at runtime), so renders are bit-reproducible: value -1
maps to table entry 0, value +1 to entry 255, zero to the neutral
middle. Warm colors mark positive relevance, cool colors negative.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np
from PIL import Image

from .errors import AuVerifyError
from .geometry import BoundingBox

DEFAULT_COLORMAP = "diverging_red_blue"
COLORMAPS = (DEFAULT_COLORMAP, "grayscale")


def normalize_symmetric(grid) -> np.ndarray:
    """Scale by the largest magnitude so values land in [-1, 1].

    All-zero grids stay all-zero; the operation is idempotent and keeps
    signs and the argmax of |v|.
    """
    g = np.asarray(grid, dtype=np.float64)
    peak = np.abs(g).max()
    if peak == 0.0:
        return g.copy()
    return g / peak


def normalize_percentile(grid, percentile: float = 99.0) -> np.ndarray:
    """Optional variant: clip at a |v| percentile before scaling."""
    g = np.asarray(grid, dtype=np.float64)
    peak = np.percentile(np.abs(g), percentile)
    if peak == 0.0:
        return normalize_symmetric(g)
    return np.clip(g / peak, -1.0, 1.0)


@lru_cache(maxsize=None)
def load_colormap(name: str = DEFAULT_COLORMAP) -> np.ndarray:
    """The named 256 x 3 uint8 lookup table."""
    if name not in COLORMAPS:
        raise AuVerifyError(f"unknown colormap {name!r}; available: {COLORMAPS}")
    raw = resources.files("auverify").joinpath(f"data/colormap_{name}.json")
    table = np.asarray(json.loads(raw.read_text(encoding="utf-8")), dtype=np.uint8)
    if table.shape != (256, 3):  # pragma: no cover - shipped data
        raise AuVerifyError(f"colormap {name} must be 256x3, got {table.shape}")
    return table


def render(grid, colormap: str = DEFAULT_COLORMAP, overlay=None,
           alpha: float = 0.6) -> np.ndarray:
    """Map a normalized [-1, 1] grid to an RGB uint8 image.

    With ``overlay`` (an H x W grayscale or H x W x 3 array in [0, 1] or
    uint8), the heatmap is alpha-blended on top of it.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise AuVerifyError(f"render expects an H x W grid, got shape {g.shape}")
    if g.min() < -1.0 or g.max() > 1.0:
        raise AuVerifyError(
            f"grid values outside [-1, 1] (min={g.min():.4g}, max={g.max():.4g}); "
            "normalize first")
    table = load_colormap(colormap)
    idx = np.floor((g + 1.0) / 2.0 * 255.0 + 0.5).astype(np.int64)
    np.clip(idx, 0, 255, out=idx)
    img = table[idx]
    if overlay is not None:
        base = np.asarray(overlay)
        if base.dtype != np.uint8:
            base = np.floor(np.clip(base, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        if base.ndim == 2:
            base = np.repeat(base[:, :, None], 3, axis=2)
        if base.shape != img.shape:
            raise AuVerifyError(
                f"overlay shape {base.shape} does not match heatmap {img.shape}")
        blended = (1.0 - alpha) * base.astype(np.float64) + alpha * img.astype(np.float64)
        img = np.floor(blended + 0.5).astype(np.uint8)
    return img


def draw_box(image: np.ndarray, box: BoundingBox, color=(0, 0, 0)) -> np.ndarray:
    """Copy of the image with a 1-px rectangle outline at inclusive coordinates."""
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim != 3 or out.shape[2] != 3:
        raise AuVerifyError(f"draw_box expects an H x W x 3 image, got {out.shape}")
    c = np.asarray(color, dtype=np.uint8)
    out[box.y_min, box.x_min:box.x_max + 1] = c
    out[box.y_max, box.x_min:box.x_max + 1] = c
    out[box.y_min:box.y_max + 1, box.x_min] = c
    out[box.y_min:box.y_max + 1, box.x_max] = c
    return out


def save_png(image: np.ndarray, path) -> None:
    """Write 8-bit RGB PNG with fixed encoder settings (reproducible bytes)."""
    Image.fromarray(image, mode="RGB").save(
        str(path), format="PNG", optimize=False, compress_level=6)


def heatmap_filename(image_id: str, au: str, preset_name: str) -> str:
    return f"{image_id}_{au}_{preset_name}.png"
