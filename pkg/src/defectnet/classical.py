"""Non-differentiable reference pipeline on single 2-D maps.

Hard Gaussian-smoothed thresholding, 3x3 erosion/dilation, Gaussian
derivative gradients and 8-connected component area filtering. Binary maps
hold only the values 0 and 255.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .refine import KernelBank, default_bank

FG = 255


@dataclass
class GradientField:
    p: np.ndarray
    q: np.ndarray
    magnitude: np.ndarray
    theta: np.ndarray


@dataclass
class Component:
    id: int
    count: int
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive
    pixels: np.ndarray  # (count, 2) row/col pairs in raster order


@dataclass
class ComponentTable:
    components: list[Component] = field(default_factory=list)

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    @property
    def total(self) -> int:
        return sum(c.count for c in self.components)


def _correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.correlate(np.asarray(img, dtype=np.float64), kernel, mode="constant", cval=0.0)


def hard_threshold(img: np.ndarray, t1: float, bank: KernelBank | None = None) -> np.ndarray:
    """255 where the Gaussian-smoothed value is >= t1, else 0."""
    bank = bank or default_bank()
    smooth = _correlate(img, bank.gauss)
    # the kernel sums to 1 only up to rounding; keep a map sitting exactly at t1 on the inclusive side
    tol = 1e-9 * max(1.0, abs(t1))
    return np.where(smooth >= t1 - tol, FG, 0).astype(np.uint8)


def _window_reduce(b: np.ndarray, struct: np.ndarray, reduce) -> np.ndarray:
    fg = np.asarray(b) > 0
    kh, kw = struct.shape
    padded = np.pad(fg, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    h, w = fg.shape
    shifted = [padded[i:i + h, j:j + w] for i in range(kh) for j in range(kw) if struct[i, j]]
    return np.where(reduce(shifted, axis=0), FG, 0).astype(np.uint8)


def erode(b: np.ndarray, bank: KernelBank | None = None) -> np.ndarray:
    """AND over the structuring window; off-image pixels count as background."""
    return _window_reduce(b, (bank or default_bank()).struct, np.all)


def dilate(b: np.ndarray, bank: KernelBank | None = None) -> np.ndarray:
    return _window_reduce(b, (bank or default_bank()).struct, np.any)


def opening(b: np.ndarray, bank: KernelBank | None = None) -> np.ndarray:
    return dilate(erode(b, bank), bank)


def gradient_field(img: np.ndarray, bank: KernelBank | None = None) -> GradientField:
    bank = bank or default_bank()
    p = _correlate(img, bank.dgx)
    q = _correlate(img, bank.dgy)
    mag = np.sqrt(p * p + q * q)
    theta = np.zeros_like(mag)
    live = mag >= 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        theta[live] = np.arctan(q[live] / p[live])
    # vertical gradients land on +pi/2 so the range is (-pi/2, pi/2]
    theta[live & (p == 0)] = np.pi / 2
    return GradientField(p, q, mag, theta)


def cc_label(b: np.ndarray) -> ComponentTable:
    """8-connected components, ids assigned in raster order of first pixel."""
    labels, n = ndimage.label(np.asarray(b) > 0, structure=np.ones((3, 3), dtype=int))
    table = ComponentTable()
    if n == 0:
        return table
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == i)
        rows, cols = rows + sl[0].start, cols + sl[1].start
        pixels = np.stack([rows, cols], axis=1)
        bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        table.components.append(Component(i, len(rows), bbox, pixels))
    return table


def cc_area_filter(b: np.ndarray, t2_pixels: int, table: ComponentTable | None = None) -> np.ndarray:
    """Keep components with at least ``t2_pixels`` pixels, erase the rest."""
    if t2_pixels < 0:
        raise ValueError(f"area threshold must be >= 0, got {t2_pixels}")
    table = table if table is not None else cc_label(b)
    out = np.zeros(np.shape(b), dtype=np.uint8)
    for comp in table:
        if comp.count >= t2_pixels:
            out[comp.pixels[:, 0], comp.pixels[:, 1]] = FG
    return out


@dataclass
class ClassicalResult:
    binary: np.ndarray
    table: ComponentTable
    defective: bool
    thresholded: np.ndarray  # hard threshold only, before morphology


def classical_pipeline(img: np.ndarray, t1: float, t2_pixels: int, bank: KernelBank | None = None) -> ClassicalResult:
    """threshold -> opening -> area filter; defective iff anything survives."""
    bank = bank or default_bank()
    thresholded = hard_threshold(img, t1, bank)
    kept = cc_area_filter(opening(thresholded, bank), t2_pixels)
    table = cc_label(kept)
    return ClassicalResult(kept, table, len(table) > 0, thresholded)
