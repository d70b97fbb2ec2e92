"""Differentiable refining network.

Classical post-processing rewritten as fixed-kernel convolutions with
learnable biases: a Gaussian-smoothed steep sigmoid for binarization, a
stack of normalized 9x9 area-count layers with relu for small-region
suppression, and a global-mean classification head.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

T_MIN, T_MAX = 0.01, 0.99


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_derivative_kernels(size: int = 5, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """x- and y-derivative-of-Gaussian kernels for cross-correlation.

    Scaled so that correlating with the ramp ``I = x`` yields exactly 1.
    """
    r = np.arange(size) - size // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    g = np.exp(-(dx**2 + dy**2) / (2 * sigma**2))
    gx = dx * g
    gx = gx / (gx * dx).sum()
    return gx, gx.T.copy()


@dataclass(frozen=True)
class KernelBank:
    gauss: np.ndarray
    area: np.ndarray
    dgx: np.ndarray
    dgy: np.ndarray
    struct: np.ndarray

    def as_conv(self, name: str, dtype) -> np.ndarray:
        """A kernel reshaped to (1, 1, kh, kw) for conv2d."""
        k = getattr(self, name)
        return k.reshape(1, 1, *k.shape).astype(dtype)


@lru_cache(maxsize=None)
def default_bank() -> KernelBank:
    dgx, dgy = gaussian_derivative_kernels(5, 1.0)
    return KernelBank(
        gauss=gaussian_kernel(3, 1.0),
        area=np.full((9, 9), 1.0 / 81.0),
        dgx=dgx,
        dgy=dgy,
        struct=np.ones((3, 3), dtype=bool),
    )


@dataclass
class RefineParams:
    t1: Tensor
    t2: list[Tensor]
    head_scale: Tensor
    head_bias: Tensor
    k_slice: float = 50.0

    @classmethod
    def create(cls, t1=0.5, t2=0.1, n_area_layers=2, head_scale=20.0, head_bias=-1.0, k_slice=50.0) -> "RefineParams":
        if n_area_layers < 1:
            raise ValueError("at least one area layer is required")
        t2s = list(t2) if np.ndim(t2) else [t2] * n_area_layers
        if len(t2s) != n_area_layers:
            raise ValueError(f"{len(t2s)} area thresholds given for {n_area_layers} layers")
        leaf = lambda v, name: Tensor(v, requires_grad=True, name=name)
        return cls(
            leaf(t1, "refine.t1"),
            [leaf(v, f"refine.t2.{i}") for i, v in enumerate(t2s)],
            leaf(head_scale, "refine.head_scale"),
            leaf(head_bias, "refine.head_bias"),
            float(k_slice),
        )

    @property
    def n_area_layers(self) -> int:
        return len(self.t2)

    def named(self) -> dict[str, Tensor]:
        out = {"refine.t1": self.t1}
        out.update({f"refine.t2.{i}": t for i, t in enumerate(self.t2)})
        out["refine.head_scale"] = self.head_scale
        out["refine.head_bias"] = self.head_bias
        return out

    def thresholds(self) -> list[Tensor]:
        return [self.t1, *self.t2]

    def clamp_(self) -> None:
        for t in self.thresholds():
            t.data = np.clip(t.data, T_MIN, T_MAX).astype(t.dtype)

    def astype(self, dtype) -> "RefineParams":
        leaf = lambda t: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
        return RefineParams(leaf(self.t1), [leaf(t) for t in self.t2], leaf(self.head_scale), leaf(self.head_bias), self.k_slice)


def density_slice(prob: Tensor, params: RefineParams, bank: KernelBank | None = None) -> Tensor:
    """sigmoid(k * (gauss * prob - t1)); a soft version of hard thresholding."""
    bank = bank or default_bank()
    prob = tc.as_tensor(prob)
    smooth = tc.conv2d(prob, bank.as_conv("gauss", prob.dtype), pad="same")
    return tc.sigmoid(tc.sub(smooth, params.t1), params.k_slice)


def area_layer(x: Tensor, t2: Tensor, bank: KernelBank | None = None) -> Tensor:
    bank = bank or default_bank()
    counted = tc.conv2d(x, bank.as_conv("area", x.dtype), pad="same")
    return tc.relu(tc.sub(counted, t2))


def area_filter_stack(sliced: Tensor, params: RefineParams, bank: KernelBank | None = None) -> Tensor:
    x = tc.as_tensor(sliced)
    for t2 in params.t2:
        x = area_layer(x, t2, bank)
    return x


def classify_head(filtered: Tensor, params: RefineParams) -> Tensor:
    """Per-image score sigmoid(scale * spatial_mean + bias), shape (n,)."""
    m = tc.mean(tc.as_tensor(filtered), axis=(1, 2, 3))
    return tc.sigmoid(tc.add(tc.mul(params.head_scale, m), params.head_bias))


def refine_forward(prob: Tensor, params: RefineParams, bank: KernelBank | None = None) -> tuple[Tensor, Tensor, Tensor]:
    sliced = density_slice(prob, params, bank)
    filtered = area_filter_stack(sliced, params, bank)
    return sliced, filtered, classify_head(filtered, params)


def plateau(params: RefineParams) -> float:
    """Value a fully covered defect interior reaches after the area stack."""
    return 1.0 - float(sum(t.data for t in params.t2))


def refined_mask(filtered: np.ndarray, params: RefineParams) -> np.ndarray:
    """Binarize the filtered map at half its interior plateau."""
    level = 0.5 * plateau(params)
    return (np.asarray(filtered) >= max(level, 1e-6)).astype(np.uint8)
