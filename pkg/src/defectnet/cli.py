"""Command-line entry point: data generation, training, inference, evaluation."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradchecks
from .checkpoint import CheckpointError
from .classical import FG, cc_label, classical_pipeline
from .metrics import classify_metrics, confusion_matrix, pixel_report, pr_curve
from .model import DefectNet
from .refine import plateau, refined_mask
from .synthdata import DatasetError, GenSpec, generate_dataset, load_dataset, read_png, stack, write_png
from .training import TrainConfig, TrainingError, fit_operating_point, staged_train, write_loss_log

def draw_boxes(gray: np.ndarray, boxes, color=(255, 0, 0)) -> np.ndarray:
    """RGB copy of ``gray`` with 1-pixel rectangle outlines; other pixels untouched."""
    rgb = np.repeat(np.asarray(gray, dtype=np.uint8)[..., None], 3, axis=2)
    h, w = gray.shape
    for r0, c0, r1, c1 in boxes:
        r0, c0, r1, c1 = max(r0 - 1, 0), max(c0 - 1, 0), min(r1 + 1, h - 1), min(c1 + 1, w - 1)
        rgb[r0, c0:c1 + 1] = color
        rgb[r1, c0:c1 + 1] = color
        rgb[r0:r1 + 1, c0] = color
        rgb[r0:r1 + 1, c1] = color
    return rgb


def _split(samples, name):
    return [s for s in samples if s.split == name]


def _pixel_sum(preds, masks) -> dict:
    conf = np.zeros((2, 2), dtype=np.int64)
    for p, m in zip(preds, masks):
        conf += confusion_matrix(p, m)
    return pixel_report(conf)


def _write_pr(points, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "precision", "recall"])
        writer.writerows([repr(t), repr(p), repr(r)] for t, p, r in points)


def _report(method, split, scores, labels, threshold, source, pixel, pixel_unrefined, pr_path) -> dict:
    both = 0 < labels.sum() < labels.size
    if both:
        _write_pr(pr_curve(scores, labels), pr_path)
    return {
        "method": method,
        "split": split,
        "n_images": int(labels.size),
        "operating_threshold": threshold,
        "threshold_source": source,
        "image": classify_metrics(scores, labels, threshold) if both else None,
        "pixel": pixel,
        "pixel_unrefined": pixel_unrefined,
        "pr_curve_csv": pr_path.name if both else None,
    }


def _eval_samples(samples):
    test = _split(samples, "test")
    return (test, "test") if test else (samples, "all")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    manifest = generate_dataset(GenSpec(**spec_dict), args.out)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    samples = load_dataset(args.data)
    train = _split(samples, "train") or samples
    result = staged_train(train, config, seed=args.seed, deterministic=args.deterministic)
    result.model.operating_threshold = fit_operating_point(result.model, train)
    out = Path(args.out)
    result.model.save(out)
    log_path = out.with_suffix(".loss.csv")
    write_loss_log(result.log_rows, log_path)
    print(f"wrote {out} and {log_path}")
    return 0


def cmd_predict(args) -> int:
    model = DefectNet.load(args.ckpt)
    img8 = read_png(args.image)
    out = model.predict(img8.astype(np.float32) / 255.0)
    prob, filtered, score = out["prob"][0, 0], out["filtered"][0, 0], float(out["score"][0])
    prefix = args.out_prefix
    write_png(f"{prefix}.seg.png", np.clip(np.round(prob * 255), 0, 255))
    level = max(plateau(model.refine), 1e-6)
    write_png(f"{prefix}.refined.png", np.clip(np.round(filtered / level * 255), 0, 255))
    mask = refined_mask(filtered, model.refine)
    boxes = [c.bbox for c in cc_label(mask)]
    Image.fromarray(draw_boxes(img8, boxes), mode="RGB").save(f"{prefix}.overlay.png", format="PNG")
    threshold = model.operating_threshold if model.operating_threshold is not None else 0.5
    verdict = "defective" if score >= threshold else "ok"
    print(json.dumps({"score": score, "threshold": threshold, "verdict": verdict, "regions": len(boxes)}))
    return 0


def cmd_eval(args) -> int:
    model = DefectNet.load(args.ckpt)
    samples = load_dataset(args.data)
    val = _split(samples, "val") or _split(samples, "train")
    threshold, source = None, None
    if val:
        threshold, source = fit_operating_point(model, val), "validation"
    if threshold is None and model.operating_threshold is not None:
        threshold, source = model.operating_threshold, "checkpoint"
    if threshold is None:
        threshold, source = 0.5, "default"

    chosen, split = _eval_samples(samples)
    images, masks, labels = stack(chosen)
    out = model.predict(images)
    refined = [refined_mask(f[0], model.refine) for f in out["filtered"]]
    raw = [(p[0] >= 0.5).astype(np.uint8) for p in out["prob"]]
    gts = [m[0] for m in masks]
    out_path = Path(args.out)
    report = _report("refined", split, out["score"], labels, threshold, source,
                     _pixel_sum(refined, gts), _pixel_sum(raw, gts), out_path.with_suffix(".pr.csv"))
    out_path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"wrote {out_path}")
    return 0


def cmd_baseline(args) -> int:
    samples = load_dataset(args.data)
    chosen, split = _eval_samples(samples)
    kept, thresholded, scores = [], [], []
    for s in chosen:
        res = classical_pipeline(s.image, args.t1, args.t2)
        kept.append((res.binary == FG).astype(np.uint8))
        thresholded.append((res.thresholded == FG).astype(np.uint8))
        scores.append(res.table.total / s.image.size)
    labels = np.array([s.label for s in chosen])
    h, w = chosen[0].image.shape
    # defective iff any component survives
    threshold = 1.0 / (h * w)
    out_path = Path(args.out)
    report = _report("classical", split, np.array(scores), labels, threshold, "any-survivor",
                     _pixel_sum(kept, [s.mask for s in chosen]), _pixel_sum(thresholded, [s.mask for s in chosen]),
                     out_path.with_suffix(".pr.csv"))
    out_path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"wrote {out_path}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in gradchecks.run_all(seed=args.seed):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:28s} max_rel_err={r.max_rel_error:.3e} coords={r.n_checked}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectnet", description="Defect segmentation with a differentiable refining network.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--spec", help="GenSpec JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="three-stage training")
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="metrics of the classical pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--t2", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, TrainingError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
