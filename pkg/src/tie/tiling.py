"""Dynamic-resolution tiling: map an arbitrary image onto a grid of at most
`max_tiles` fixed-size tiles while preserving aspect ratio.

The planner enumerates every grid (rows x cols) within the tile budget,
sizes the largest aspect-preserving resize that fits the grid, and keeps
the grid with the largest resized area. Ties break toward fewer tiles,
then toward the squarer grid.
"""

import math
from dataclasses import dataclass

import numpy as np

from .images import RawImage


@dataclass
class TilePlan:
    grid_rows: int
    grid_cols: int
    resized_h: int
    resized_w: int
    tile_h: int
    tile_w: int
    pad_bottom: int
    pad_right: int

    @property
    def n_tiles(self):
        return self.grid_rows * self.grid_cols

    def describe(self):
        return (f"grid={self.grid_rows}x{self.grid_cols} tiles={self.n_tiles} "
                f"resized={self.resized_h}x{self.resized_w} "
                f"tile={self.tile_h}x{self.tile_w} "
                f"pad_bottom={self.pad_bottom} pad_right={self.pad_right}")


def _fit(height, width, box_h, box_w):
    """Largest aspect-preserving (h, w) fitting inside the box.

    The width is derived from the rounded height (largest height whose
    derived width still fits), so the integer pair tracks the true aspect
    ratio to half a pixel of the smaller side instead of compounding two
    independent rounding errors.
    """
    rh = min(box_h, math.ceil((box_w + 0.5) * height / width) - 1)
    rh = max(1, rh)
    rw = min(box_w, max(1, round(rh * width / height)))
    return rh, rw


def plan_tiles(img, tile_h, tile_w, max_tiles):
    if max_tiles < 1:
        raise ValueError("max_tiles must be >= 1")
    best = None
    best_key = None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles // rows + 1):
            rh, rw = _fit(img.height_px, img.width_px, rows * tile_h, cols * tile_w)
            # maximize area; prefer fewer tiles, then squarer grids;
            # (rows, cols) last so the winner is unique
            key = (-rh * rw, rows * cols, abs(rows - cols), rows, cols)
            if best_key is None or key < best_key:
                best_key = key
                best = TilePlan(rows, cols, rh, rw, tile_h, tile_w,
                                rows * tile_h - rh, cols * tile_w - rw)
    return best


def resize_bilinear(pixels, out_h, out_w):
    """Bilinear resample (align-corners=false convention)."""
    in_h, in_w, c = pixels.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    p00 = pixels[y0][:, x0]
    p01 = pixels[y0][:, x1]
    p10 = pixels[y1][:, x0]
    p11 = pixels[y1][:, x1]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return top * (1 - wy) + bot * wy


def split(img, plan):
    """Resize, replicate-pad, and cut the image into row-major tiles."""
    rh, rw = _fit(img.height_px, img.width_px,
                  plan.grid_rows * plan.tile_h, plan.grid_cols * plan.tile_w)
    if (rh, rw) != (plan.resized_h, plan.resized_w):
        raise ValueError("tile plan does not match this image")
    resized = resize_bilinear(img.pixels, plan.resized_h, plan.resized_w)
    padded = np.pad(resized, ((0, plan.pad_bottom), (0, plan.pad_right), (0, 0)),
                    mode="edge")
    tiles = []
    for r in range(plan.grid_rows):
        for c in range(plan.grid_cols):
            tiles.append(padded[r * plan.tile_h:(r + 1) * plan.tile_h,
                                c * plan.tile_w:(c + 1) * plan.tile_w])
    return tiles


def reassemble(tiles, plan):
    """Inverse of split (pad cropped): recovers the resized image."""
    rows = []
    for r in range(plan.grid_rows):
        rows.append(np.concatenate(
            tiles[r * plan.grid_cols:(r + 1) * plan.grid_cols], axis=1))
    full = np.concatenate(rows, axis=0)
    return full[:plan.resized_h, :plan.resized_w]


def tokens_per_tile(tile_h, tile_w, patch, pool):
    """Visual tokens per tile after patching and pool x pool downsampling."""
    if tile_h % patch or tile_w % patch:
        raise ValueError("patch size must divide tile dims")
    gh, gw = tile_h // patch, tile_w // patch
    if gh % pool or gw % pool:
        raise ValueError("downsampling factor must divide the patch grid")
    return (gh // pool) * (gw // pool)
