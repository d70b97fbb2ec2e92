"""Three-stage training.

Stage 1 fits the segmentation network alone. Stage 2 adds the slicing loss
and unlocks the binarization threshold. Stage 3 adds the area loss and
unlocks the area thresholds and the head. Losses stay on once introduced.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensorcore as tc
from .metrics import select_operating_point
from .model import DefectNet
from .refine import area_filter_stack, density_slice
from .segnet import SegNetConfig, seg_forward
from .synthdata import Sample, stack

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "stage", "l_seg", "l_slice", "l_area", "l_total"]


class TrainingError(RuntimeError):
    pass


@dataclass
class StageSchedule:
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    epochs_stage3: int = 10

    def epochs(self) -> list[int]:
        return [self.epochs_stage1, self.epochs_stage2, self.epochs_stage3]


@dataclass
class TrainConfig:
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    refine: dict = field(default_factory=dict)  # kwargs for RefineParams.create
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    lr: float = 1e-3
    batch_size: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {"segnet", "refine", "weights", "schedule", "lr", "batch_size"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        sched = d.pop("schedule", {})
        if isinstance(sched, (list, tuple)):
            sched = dict(zip(("epochs_stage1", "epochs_stage2", "epochs_stage3"), sched))
        return cls(
            segnet=SegNetConfig(**d.pop("segnet", {})),
            refine=d.pop("refine", {}),
            weights=L.LossWeights(**d.pop("weights", {})),
            schedule=StageSchedule(**sched),
            **d,
        )

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def trainable_groups(model: DefectNet, stage: int) -> list[tc.Tensor]:
    group = model.seg.trainable()
    if stage >= 2:
        group = group + [model.refine.t1]
    if stage >= 3:
        group = group + list(model.refine.t2) + [model.refine.head_scale, model.refine.head_bias]
    return group


def all_parameters(model: DefectNet) -> list[tc.Tensor]:
    return trainable_groups(model, 3)


def compute_losses(model: DefectNet, images, masks, stage: int, weights: L.LossWeights) -> L.LossTerms:
    """Forward one batch in train mode and assemble the stage's loss terms."""
    images = tc.as_tensor(images)
    prob = seg_forward(model.seg, images, "train")
    label = tc.Tensor(masks)
    seg_mse = L.mse(prob, label)
    penalty = L.weight_penalty(model.seg.weights(), weights.lam, images.shape[0])
    l_slice = l_area = None
    if stage >= 2:
        sliced = density_slice(prob, model.refine)
        l_slice = L.slice_loss(sliced, label)
        if stage >= 3:
            filtered = area_filter_stack(sliced, model.refine)
            l_area = L.area_loss(filtered, label, model.refine.t2)
    return L.total_loss(seg_mse, penalty, l_slice, l_area, weights)


@dataclass
class TrainResult:
    model: DefectNet
    log_rows: list[dict]
    snapshots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def staged_train(
    samples: list[Sample],
    config: TrainConfig | None = None,
    seed: int = 0,
    deterministic: bool = True,
    snapshot: bool = False,
    model: DefectNet | None = None,
) -> TrainResult:
    """Run the three stages with Adam and return the trained model and loss log.

    With ``snapshot`` the parameter state after each stage is kept (keys
    ``init``, ``stage1``, ``stage2``, ``stage3``).
    """
    config = config or TrainConfig()
    if not samples:
        raise TrainingError("training set is empty")
    images, masks, _ = stack(samples)
    if images.shape[2] % 4 or images.shape[3] % 4:
        raise TrainingError(f"training images must have sides divisible by 4, got {images.shape[2:]}")
    model = model or DefectNet.create(config.segnet, config.refine, seed=seed)
    rng = np.random.default_rng(seed)

    # one Adam state per parameter, kept across stages
    states = {id(p): tc.AdamState(lr=config.lr) for p in all_parameters(model)}
    snapshots = {"init": _state_copy(model)} if snapshot else {}
    rows: list[dict] = []
    epoch_no = 0
    ctx = tc.deterministic() if deterministic else contextlib.nullcontext()
    with ctx:
        for stage, n_epochs in enumerate(config.schedule.epochs(), start=1):
            group = trainable_groups(model, stage)
            for _ in range(n_epochs):
                epoch_no += 1
                sums = np.zeros(4)
                order = rng.permutation(len(samples))
                n_batches = 0
                for start in range(0, len(order), config.batch_size):
                    idx = order[start:start + config.batch_size]
                    terms = compute_losses(model, images[idx], masks[idx], stage, config.weights)
                    values = np.array([float(t.data) for t in (terms.seg, terms.slice, terms.area, terms.total)])
                    if not np.all(np.isfinite(values)):
                        raise TrainingError(f"loss diverged at epoch {epoch_no} (stage {stage}): {values.tolist()}")
                    grads = tc.backward(terms.total, wrt=group)
                    for p, g in zip(group, grads):
                        p.data, states[id(p)] = tc.adam_step(p.data, g, states[id(p)])
                    model.refine.clamp_()
                    sums += values
                    n_batches += 1
                mean = sums / n_batches
                row = dict(zip(LOG_HEADER, [epoch_no, stage, *mean.tolist()]))
                rows.append(row)
                log.info("epoch %d stage %d total %.5f", epoch_no, stage, row["l_total"])
            if snapshot:
                snapshots[f"stage{stage}"] = _state_copy(model)
    return TrainResult(model, rows, snapshots)


def _state_copy(model: DefectNet) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def fit_operating_point(model: DefectNet, samples: list[Sample]) -> float | None:
    """F1-maximizing score threshold on ``samples``; None if only one class is present."""
    images, _, labels = stack(samples)
    if labels.min() == labels.max():
        return None
    scores = model.predict(images)["score"]
    return select_operating_point(scores, labels)


def write_loss_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
