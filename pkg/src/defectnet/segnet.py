"""Fully convolutional segmentation network.

Two Conv3x3-BN-ReLU-MaxPool blocks, a dilated Conv3x3-BN-ReLU stage
without further pooling, a 1x1 projection to one channel, a sigmoid and a
fixed bilinear x4 upsample back to input resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import BatchNormState, ShapeError, Tensor


@dataclass
class SegNetConfig:
    block_channels: list[int] = field(default_factory=lambda: [16, 32])
    deep_channels: int = 64
    deep_depth: int = 2
    dilation: int = 2
    in_channels: int = 1

    def __post_init__(self):
        widths = [*self.block_channels, self.deep_channels, self.in_channels]
        if len(self.block_channels) != 2:
            raise ValueError("exactly two pooled blocks are supported (network stride must be 4)")
        if min(widths) < 1 or self.deep_depth < 1 or self.dilation < 1:
            raise ValueError(f"invalid SegNetConfig: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegNetParams:
    config: SegNetConfig
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    def weights(self) -> list[Tensor]:
        """Convolution kernels only; these carry the weight penalty."""
        return [t for k, t in self.tensors.items() if k.endswith(".weight")]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def astype(self, dtype) -> "SegNetParams":
        tensors = {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()}
        bn = {
            k: BatchNormState(
                None if s.running_mean is None else s.running_mean.astype(dtype),
                None if s.running_var is None else s.running_var.astype(dtype),
                s.momentum,
                s.eps,
            )
            for k, s in self.bn.items()
        }
        return SegNetParams(self.config, tensors, bn)


def _layer_plan(config: SegNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel_size) for every conv."""
    plan = []
    c_in = config.in_channels
    for i, c_out in enumerate(config.block_channels):
        plan.append((f"block{i + 1}", c_in, c_out, 3))
        c_in = c_out
    for i in range(config.deep_depth):
        plan.append((f"deep{i + 1}", c_in, config.deep_channels, 3))
        c_in = config.deep_channels
    plan.append(("head", c_in, 1, 1))
    return plan


def build_segnet(config: SegNetConfig | None = None, seed: int = 0) -> SegNetParams:
    """He-normal kernels, zero biases, unit BN scale, zero BN shift."""
    config = config or SegNetConfig()
    rng = np.random.default_rng(seed)
    dtype = tc.default_dtype()
    tensors: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    for name, c_in, c_out, k in _layer_plan(config):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        tensors[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype), requires_grad=True, name=f"{name}.bias")
        if name != "head":
            tensors[f"{name}.gamma"] = Tensor(np.ones(c_out, dtype), requires_grad=True, name=f"{name}.gamma")
            tensors[f"{name}.beta"] = Tensor(np.zeros(c_out, dtype), requires_grad=True, name=f"{name}.beta")
            bn[name] = BatchNormState.initialized(c_out, dtype)
    return SegNetParams(config, tensors, bn)


def count_parameters(params: SegNetParams) -> int:
    """Learnable scalars (kernels, biases, BN scale/shift); running stats excluded."""
    return int(sum(t.data.size for t in params.tensors.values()))


def seg_forward(params: SegNetParams, images, mode: str = "infer") -> Tensor:
    """Per-pixel defect probability, shape (n, 1, H, W), values in (0, 1)."""
    x = tc.as_tensor(images)
    if x.data.ndim != 4:
        raise ShapeError(f"expected (n, c, H, W) images, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"image height and width must be divisible by 4, got {h}x{w}; pad the input")
    p = params.tensors
    cfg = params.config

    def conv_bn_relu(x, name, dilation=1):
        x = tc.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], pad="same", dilation=dilation)
        x = tc.batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"], mode, params.bn[name])
        return tc.relu(x)

    for i in range(len(cfg.block_channels)):
        x = tc.maxpool2(conv_bn_relu(x, f"block{i + 1}"))
    for i in range(cfg.deep_depth):
        x = conv_bn_relu(x, f"deep{i + 1}", dilation=cfg.dilation)
    x = tc.conv2d(x, p["head.weight"], p["head.bias"], pad="same")
    return tc.upsample4(tc.sigmoid(x, 1.0))


def pad_to_multiple(image: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad the trailing two axes up to ``multiple``; returns padded array and original (H, W)."""
    h, w = image.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, widths), (h, w)
