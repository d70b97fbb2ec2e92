"""Loss cluster: segmentation MSE + weight penalty, slicing MSE, area MSE."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from . import tensorcore as tc
from .tensorcore import ShapeError, Tensor


@dataclass
class LossWeights:
    lam: float = 1e-4
    alpha_seg: float = 1.0
    alpha_slice: float = 1.0
    alpha_area: float = 1.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: prediction {a.shape} vs label {b.shape}")


def mse(pred, target) -> Tensor:
    pred, target = tc.as_tensor(pred), tc.as_tensor(target)
    _same_shape(pred, target, "mse")
    return tc.mean(tc.square(tc.sub(pred, target)))


def weight_penalty(weights: Sequence[Tensor], lam: float, batch_size: int) -> Tensor:
    """(lam / n) * sum of squared kernel entries."""
    total = tc.as_tensor(0.0)
    for w in weights:
        total = tc.add(total, tc.tsum(tc.square(w)))
    return tc.mul(total, lam / batch_size)


def seg_loss(pred, label, weights: Sequence[Tensor], lam: float, batch_size: int) -> Tensor:
    pred, label = tc.as_tensor(pred), tc.as_tensor(label)
    _same_shape(pred, label, "seg_loss")
    return tc.add(mse(pred, label), weight_penalty(weights, lam, batch_size))


def slice_loss(sliced, label) -> Tensor:
    sliced, label = tc.as_tensor(sliced), tc.as_tensor(label)
    _same_shape(sliced, label, "slice_loss")
    return mse(sliced, label)


def area_loss(filtered, label, t2: Sequence[Tensor]) -> Tensor:
    """MSE against the label scaled by the interior plateau ``P = 1 - sum(t2)``.

    The result is divided by P**2. Without that factor the loss can always be
    lowered by raising t2, since the scaled target itself shrinks toward 0.
    """
    filtered, label = tc.as_tensor(filtered), tc.as_tensor(label)
    _same_shape(filtered, label, "area_loss")
    plateau = tc.as_tensor(1.0)
    for t in t2:
        plateau = tc.sub(plateau, t)
    err = mse(filtered, tc.mul(label, plateau))
    return tc.div(err, tc.square(plateau))


@dataclass
class LossTerms:
    """Weighted terms; ``total`` is their sum."""
    seg: Tensor
    slice: Tensor
    area: Tensor
    total: Tensor


def total_loss(seg_mse: Tensor, penalty: Tensor, l_slice: Tensor | None, l_area: Tensor | None,
               weights: LossWeights) -> LossTerms:
    """Weighted sum; terms passed as ``None`` are inactive in the current stage."""
    zero = tc.as_tensor(0.0)
    seg = tc.add(tc.mul(seg_mse, weights.alpha_seg), penalty)
    sl = tc.mul(l_slice, weights.alpha_slice) if l_slice is not None else zero
    ar = tc.mul(l_area, weights.alpha_area) if l_area is not None else zero
    return LossTerms(seg, sl, ar, tc.add(tc.add(seg, sl), ar))
