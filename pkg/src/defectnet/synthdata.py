"""Seeded procedural stand-in for an industrial parts-defect dataset.

Each image shows a machined part (horizontal grooves plus noise) below a
darker backdrop, optionally with one defect of five families. Geometry is
rendered on a supersampled grid; the mask is the exact geometry binarized
at 50% pixel coverage, while the image gets the anti-aliased coverage.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

DEFECT_TYPES = ("outer-chip", "inner-chip", "crack", "top-scratch", "side-scratch")
ALL_TYPES = DEFECT_TYPES + ("none",)
MANIFEST_HEADER = ["path", "mask_path", "label", "defect_type", "split"]
MIN_DEFECT_PIXELS = 16


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError):
    pass


class CorruptImageError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class LabelMismatchError(DatasetError):
    pass


@dataclass
class GenSpec:
    height: int = 64
    width: int = 64
    counts: dict[str, int] = field(default_factory=lambda: {t: 40 for t in ALL_TYPES})
    test_fraction: float = 1 / 3
    base_gray: float = 0.3
    backdrop_gray: float = 0.15
    groove_period: float = 6.0
    groove_contrast: float = 0.04
    noise_sigma: float = 0.05
    defect_delta: float = 0.4
    # geometry below is in pixels at 64x64 and scales with image size
    chip_radius: tuple[float, float] = (2.5, 5.0)
    chip_discs: tuple[int, int] = (2, 5)
    crack_length: tuple[float, float] = (16.0, 32.0)
    crack_width: tuple[float, float] = (1.0, 3.0)
    scratch_length: tuple[float, float] = (20.0, 44.0)
    scratch_width: tuple[float, float] = (1.0, 3.0)
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError(f"image size must be divisible by 4, got {self.height}x{self.width}")
        unknown = set(self.counts) - set(ALL_TYPES)
        if unknown:
            raise ValueError(f"unknown defect types {sorted(unknown)}; expected {ALL_TYPES}")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("counts must be >= 0")
        for name in ("chip_radius", "chip_discs", "crack_length", "crack_width", "scratch_length", "scratch_width"):
            setattr(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_json(cls, path) -> "GenSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def scale(self) -> float:
        return min(self.height, self.width) / 64.0


def easy_spec(seed: int = 0, per_type: int = 24, clean: int = 120, **overrides) -> GenSpec:
    """High-contrast, low-noise corpus where a mid-intensity threshold separates defects."""
    kw = dict(
        counts={**{t: per_type for t in DEFECT_TYPES}, "none": clean},
        defect_delta=0.4,
        noise_sigma=0.05,
        crack_width=(2.0, 3.0),
        scratch_width=(2.0, 3.0),
        seed=seed,
    )
    kw.update(overrides)
    return GenSpec(**kw)


@dataclass
class Sample:
    image: np.ndarray  # float32 in [0, 1]
    mask: np.ndarray  # uint8 in {0, 1}
    label: int
    defect_type: str
    split: str = "train"
    path: str = ""


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

class _Canvas:
    """Supersampled boolean coverage grid."""

    def __init__(self, h: int, w: int, ss: int):
        self.h, self.w, self.ss = h, w, ss
        self.grid = np.zeros((h * ss, w * ss), dtype=bool)

    def _window(self, y0, y1, x0, x1):
        ss = self.ss
        r0, r1 = max(int(np.floor(y0 * ss)), 0), min(int(np.ceil(y1 * ss)) + 1, self.h * ss)
        c0, c1 = max(int(np.floor(x0 * ss)), 0), min(int(np.ceil(x1 * ss)) + 1, self.w * ss)
        if r0 >= r1 or c0 >= c1:
            return None
        ys = (np.arange(r0, r1) + 0.5) / ss
        xs = (np.arange(c0, c1) + 0.5) / ss
        return (slice(r0, r1), slice(c0, c1)), ys[:, None], xs[None, :]

    def disc(self, cy, cx, r):
        win = self._window(cy - r, cy + r, cx - r, cx + r)
        if win:
            sl, ys, xs = win
            self.grid[sl] |= (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r

    def segment(self, p0, p1, width):
        (y0, x0), (y1, x1) = p0, p1
        half = width / 2
        win = self._window(min(y0, y1) - half, max(y0, y1) + half, min(x0, x1) - half, max(x0, x1) + half)
        if not win:
            return
        sl, ys, xs = win
        dy, dx = y1 - y0, x1 - x0
        seg2 = dy * dy + dx * dx
        t = np.clip(((ys - y0) * dy + (xs - x0) * dx) / seg2, 0, 1) if seg2 > 0 else 0.0
        d2 = (ys - (y0 + t * dy)) ** 2 + (xs - (x0 + t * dx)) ** 2
        self.grid[sl] |= d2 <= half * half

    def coverage(self) -> np.ndarray:
        ss = self.ss
        return self.grid.reshape(self.h, ss, self.w, ss).mean(axis=(1, 3))


def _draw_defect(canvas: _Canvas, kind: str, spec: GenSpec, edge_row: float, rng: np.random.Generator) -> None:
    h, w, s = spec.height, spec.width, spec.scale
    uni = lambda lo_hi: rng.uniform(lo_hi[0] * s, lo_hi[1] * s)
    if kind in ("outer-chip", "inner-chip"):
        if kind == "outer-chip":
            cy, cx = edge_row, rng.uniform(0.15 * w, 0.85 * w)
        else:
            cy, cx = rng.uniform(edge_row + 0.2 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)
        for _ in range(rng.integers(spec.chip_discs[0], spec.chip_discs[1] + 1)):
            r = uni(spec.chip_radius)
            canvas.disc(cy + rng.normal(0, r * 0.6), cx + rng.normal(0, r * 0.6), r)
    elif kind == "crack":
        length, width = uni(spec.crack_length), uni(spec.crack_width)
        y, x = rng.uniform(0.6 * h, 0.9 * h), rng.uniform(0.1 * w, 0.9 * w)
        angle = rng.uniform(0, 2 * np.pi)
        step = 2.0 * s
        for _ in range(max(int(length / step), 1)):
            angle += rng.normal(0, 0.35)
            ny = np.clip(y + step * np.sin(angle), 1, h - 2)
            nx = np.clip(x + step * np.cos(angle), 1, w - 2)
            canvas.segment((y, x), (ny, nx), width)
            y, x = ny, nx
    elif kind in ("top-scratch", "side-scratch"):
        length, width = uni(spec.scratch_length), uni(spec.scratch_width)
        if kind == "top-scratch":
            angle = rng.uniform(0, np.pi)
        else:
            angle = rng.uniform(-np.pi / 12, np.pi / 12)
        cy, cx = rng.uniform(edge_row + 0.15 * h, 0.85 * h), rng.uniform(0.3 * w, 0.7 * w)
        dy, dx = 0.5 * length * np.sin(angle), 0.5 * length * np.cos(angle)
        canvas.segment((cy - dy, cx - dx), (cy + dy, cx + dx), width)
    else:
        raise ValueError(f"unknown defect type {kind!r}")


def _largest_component(mask: np.ndarray) -> int:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return int(np.bincount(labels.ravel())[1:].max()) if n else 0


def render_sample(spec: GenSpec, index: int, defect_type: str) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair as uint8 arrays; mask values are 0/255.

    Background, defect geometry and noise draw from separate streams keyed
    on (seed, index), so the same index with ``defect_type="none"`` yields
    the identical defect-free render.
    """
    if defect_type not in ALL_TYPES:
        raise ValueError(f"unknown defect type {defect_type!r}")
    h, w = spec.height, spec.width
    bg_rng, defect_rng, noise_rng = (np.random.default_rng([spec.seed, index, k]) for k in range(3))

    edge_row = bg_rng.uniform(0.1, 0.3) * h
    phase = bg_rng.uniform(0, 2 * np.pi)
    rows = np.arange(h)[:, None] + 0.5
    part = rows >= edge_row
    grooves = 0.5 * spec.groove_contrast * np.sin(2 * np.pi * rows / spec.groove_period + phase)
    img = np.where(part, spec.base_gray + grooves, spec.backdrop_gray) * np.ones((1, w))

    mask = np.zeros((h, w), dtype=bool)
    if defect_type != "none":
        for _ in range(100):
            canvas = _Canvas(h, w, spec.supersample)
            _draw_defect(canvas, defect_type, spec, edge_row, defect_rng)
            cov = canvas.coverage()
            mask = cov >= 0.5
            if _largest_component(mask) >= MIN_DEFECT_PIXELS:
                break
        else:
            raise RuntimeError(f"could not draw a {defect_type} of >= {MIN_DEFECT_PIXELS} pixels; geometry too small")
        img = img * (1 - cov) + (spec.base_gray + spec.defect_delta) * cov

    img = img + noise_rng.normal(0, spec.noise_sigma, size=(h, w))
    img8 = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img8, np.where(mask, 255, 0).astype(np.uint8)


def sample_plan(spec: GenSpec) -> list[tuple[int, str, str]]:
    """(index, defect_type, split) per sample; the tail of each type goes to test."""
    plan, index = [], 0
    for kind in ALL_TYPES:
        n = spec.counts.get(kind, 0)
        n_test = int(round(n * spec.test_fraction))
        for j in range(n):
            plan.append((index, kind, "test" if j >= n - n_test else "train"))
            index += 1
    return plan


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------

def write_png(path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "P", "1"):
                im = im.convert("L")
            return np.array(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"cannot decode image {path}: {exc}") from exc


def generate_dataset(spec: GenSpec, out_dir) -> Path:
    """Render every sample to ``out_dir`` and return the manifest path."""
    plan = sample_plan(spec)
    if not plan:
        raise ValueError("GenSpec requests zero samples")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out}: {exc}") from exc
    rows = []
    for index, kind, split in plan:
        img, mask = render_sample(spec, index, kind)
        name = f"{index:04d}.png"
        write_png(out / "images" / name, img)
        write_png(out / "masks" / name, mask)
        rows.append([f"images/{name}", f"masks/{name}", int(mask.any()), kind, split])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    (out / "genspec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(manifest_path, split: str | None = None) -> list[Sample]:
    """Load samples listed in a manifest, optionally only one split."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DatasetError(f"manifest header {reader.fieldnames} != {MANIFEST_HEADER}")
        for rowno, row in enumerate(reader, start=2):
            if split is not None and row["split"] != split:
                continue
            where = f"{manifest_path}:{rowno}"
            try:
                img = read_png(root / row["path"])
                mask = read_png(root / row["mask_path"])
            except DatasetError as exc:
                raise type(exc)(f"{where}: {exc}") from exc
            if img.shape != mask.shape:
                raise ShapeMismatchError(f"{where}: image {img.shape} vs mask {mask.shape}")
            if not np.isin(mask, (0, 255)).all():
                raise CorruptImageError(f"{where}: mask {row['mask_path']} has values other than 0/255")
            label = int(mask.any())
            if int(row["label"]) != label:
                raise LabelMismatchError(f"{where}: manifest label {row['label']} but mask foreground says {label}")
            samples.append(Sample(
                image=img.astype(np.float32) / 255.0,
                mask=(mask > 0).astype(np.uint8),
                label=label,
                defect_type=row["defect_type"],
                split=row["split"],
                path=row["path"],
            ))
    return samples


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays: images (n,1,H,W), masks (n,1,H,W), labels (n,)."""
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, masks, labels
