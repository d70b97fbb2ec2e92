import numpy as np
import pytest

from fractions import Fraction

from defectnet import synthdata as sd
from defectnet.classical import FG


def naive_conv2d(x, k, bias=None, pad="same", dilation=1):
    """Direct loop cross-correlation, float64."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = k.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    if pad == "same":
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
        xp[:, :, ph:ph + h, pw:pw + w] = x
        ho, wo = h, w
    else:
        xp = np.asarray(x, dtype=np.float64)
        ho, wo = h - 2 * ph, w - 2 * pw
    out = np.zeros((n, oc, ho, wo))
    for b in range(n):
        for o in range(oc):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += k[o, ci, i, j] * xp[b, ci, y + i * dilation, xx + j * dilation]
                    out[b, o, y, xx] = acc
    return out


def flood_fill_labels(fg):
    """Stack-based 8-connected flood fill in raster order; returns list of pixel sets."""
    h, w = fg.shape
    seen = np.zeros_like(fg, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if fg[r, c] and not seen[r, c]:
                stack, pix = [(r, c)], set()
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    pix.add((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and fg[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                stack.append((yy, xx))
                comps.append(pix)
    return comps


def brute_morph(b, op):
    """AND/OR over the 3x3 window, off-image pixels counted as background."""
    fg = b > 0
    h, w = fg.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            vals = []
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    vals.append(bool(fg[rr, cc]) if 0 <= rr < h and 0 <= cc < w else False)
            out[r, c] = FG if (all(vals) if op == "and" else any(vals)) else 0
    return out


def brute_seg_metrics(pred, gt):
    """Pixel metrics from a per-pixel tally, exact rationals."""
    n = [[0, 0], [0, 0]]
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        n[int(bool(g))][int(bool(p))] += 1
    t = [n[0][0] + n[0][1], n[1][0] + n[1][1]]
    col = [n[0][0] + n[1][0], n[0][1] + n[1][1]]
    present = [i for i in (0, 1) if t[i]]
    total = t[0] + t[1]
    return {
        "confusion": n,
        "pixel_acc": float(Fraction(n[0][0] + n[1][1], total)),
        "mean_acc": float(sum(Fraction(n[i][i], t[i]) for i in present) / len(present)),
        "mean_iu": float(sum(Fraction(n[i][i], t[i] + col[i] - n[i][i]) for i in present) / len(present)),
    }


def brute_classify(scores, labels, thr):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        pos = s >= thr
        if pos and y:
            tp += 1
        elif pos:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    ratio = lambda a, b: float(Fraction(a, b)) if b else 0.0
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn, "precision": ratio(tp, tp + fp), "recall": ratio(tp, tp + fn),
            "f1": ratio(2 * tp, 2 * tp + fp + fn), "accuracy": ratio(tp + tn, len(labels))}


def brute_pr_curve(scores, labels):
    out = []
    for thr in sorted(set(float(s) for s in scores), reverse=True):
        m = brute_classify(scores, labels, thr)
        out.append((thr, m["precision"], m["recall"]))
    return out


def in_memory_samples(spec, split=None):
    out = []
    for idx, kind, sp in sd.sample_plan(spec):
        if split is not None and sp != split:
            continue
        img, m = sd.render_sample(spec, idx, kind)
        out.append(sd.Sample(img.astype(np.float32) / 255, (m > 0).astype(np.uint8), int(m.any()), kind, sp))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
