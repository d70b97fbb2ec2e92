"""Segmentation network and refining network bundled for training and I/O."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .checkpoint import HeaderError, load_checkpoint, save_checkpoint
from .refine import RefineParams, default_bank, refine_forward
from .segnet import SegNetConfig, SegNetParams, build_segnet, pad_to_multiple, seg_forward
from .tensorcore import BatchNormState, Tensor


@dataclass
class Outputs:
    prob: Tensor
    sliced: Tensor
    filtered: Tensor
    score: Tensor


@dataclass
class DefectNet:
    seg: SegNetParams
    refine: RefineParams
    operating_threshold: float | None = None

    @classmethod
    def create(cls, seg_config: SegNetConfig | None = None, refine_kwargs: dict | None = None, seed: int = 0) -> "DefectNet":
        return cls(build_segnet(seg_config, seed), RefineParams.create(**(refine_kwargs or {})))

    def forward(self, images, mode: str = "infer") -> Outputs:
        prob = seg_forward(self.seg, images, mode)
        sliced, filtered, score = refine_forward(prob, self.refine, default_bank())
        return Outputs(prob, sliced, filtered, score)

    def predict(self, images: np.ndarray, batch_size: int = 16) -> dict[str, np.ndarray]:
        """Inference on an (n, 1, H, W) or (H, W) array of any spatial size."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 2:
            images = images[None, None]
        padded, (h, w) = pad_to_multiple(images, 4)
        chunks = {"prob": [], "sliced": [], "filtered": [], "score": []}
        for i in range(0, len(padded), batch_size):
            out = self.forward(padded[i:i + batch_size], "infer")
            for key in chunks:
                arr = getattr(out, key).data
                chunks[key].append(arr if key == "score" else arr[..., :h, :w])
        return {k: np.concatenate(v) for k, v in chunks.items()}

    def astype(self, dtype) -> "DefectNet":
        return DefectNet(self.seg.astype(dtype), self.refine.astype(dtype), self.operating_threshold)

    # -- serialization -----------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.seg.tensors.items()}
        for name, st in self.seg.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        out.update({k: t.data for k, t in self.refine.named().items()})
        return out

    def meta(self) -> dict:
        return {
            "segnet": self.seg.config.to_dict(),
            "k_slice": self.refine.k_slice,
            "n_area_layers": self.refine.n_area_layers,
            "operating_threshold": self.operating_threshold,
        }

    def save(self, path) -> None:
        save_checkpoint(self.state_dict(), path, self.meta())

    @classmethod
    def load(cls, path) -> "DefectNet":
        tensors, meta = load_checkpoint(path)
        if "segnet" not in meta or "n_area_layers" not in meta:
            raise HeaderError(f"{path}: checkpoint lacks model metadata")
        seg = build_segnet(SegNetConfig(**meta["segnet"]), seed=0)
        for k, t in seg.tensors.items():
            t.data = _take(tensors, k, t.shape)
        for name, st in seg.bn.items():
            c = st.running_mean.shape
            seg.bn[name] = BatchNormState(_take(tensors, f"{name}.running_mean", c), _take(tensors, f"{name}.running_var", c))
        n = int(meta["n_area_layers"])
        refine = RefineParams.create(n_area_layers=n, k_slice=meta["k_slice"])
        for k, t in refine.named().items():
            t.data = _take(tensors, k, ())
        return cls(seg, refine, meta.get("operating_threshold"))


def _take(tensors: dict[str, np.ndarray], name: str, shape) -> np.ndarray:
    if name not in tensors:
        raise HeaderError(f"checkpoint has no tensor {name!r}")
    arr = tensors[name]
    if arr.shape != tuple(shape):
        raise HeaderError(f"checkpoint tensor {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.astype(tc.default_dtype())
