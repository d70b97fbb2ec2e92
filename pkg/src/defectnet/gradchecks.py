"""Finite-difference checks for every differentiable layer and the full model."""
from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensorcore as tc
from .model import DefectNet
from .refine import RefineParams, area_filter_stack, classify_head, density_slice
from .segnet import SegNetConfig
from .training import compute_losses

TOLERANCE = 1e-5


def _projected(fn, rng):
    """Wrap ``fn`` as a fixed random linear functional of its output."""
    cache = {}

    def build(leaves):
        out = fn(leaves)
        if out.shape not in cache:
            cache[out.shape] = rng.standard_normal(out.shape)
        return tc.tsum(tc.mul(out, cache[out.shape]))

    return build


def _bn_graph(mode):
    def build(leaves):
        x, g, b = leaves
        state = tc.BatchNormState(np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 1.1]))
        return tc.batchnorm(x, g, b, mode, state)
    return build


def _composite_case(seed: int = 0):
    """Small segnet + refine net; loss is the stage-3 total loss.

    A network this narrow often has a dead channel (exactly zero gradient) or
    a relu/max input within the finite-difference step of its kink, and a
    relative-error check cannot score either. The default seed avoids both.
    """
    cfg = SegNetConfig(block_channels=[2, 3], deep_channels=4, deep_depth=1, dilation=2)
    with tc.precision(np.float64):
        model = DefectNet.create(cfg, {"t1": 0.5, "t2": [0.05, 0.04]}, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (2, 1, 8, 8))
    masks = (rng.uniform(0, 1, (2, 1, 8, 8)) > 0.6).astype(np.float64)
    # conv biases feeding a train-mode batchnorm have an exactly zero gradient,
    # which a relative-error check cannot score; they stay fixed here
    names = [n for n in model.seg.tensors if not (n.endswith(".bias") and n[:-5] in model.seg.bn)]
    seg_inputs = [model.seg.tensors[n].data for n in names]
    ref_inputs = [model.refine.t1.data, *(t.data for t in model.refine.t2)]
    k = len(seg_inputs)

    def build(leaves):
        m = model.astype(np.float64)
        m.seg.tensors.update(zip(names, leaves[:k]))
        m.refine.t1 = leaves[k]
        m.refine.t2 = list(leaves[k + 1:k + 1 + len(m.refine.t2)])
        terms = compute_losses(m, leaves[-1], masks, 3, L.LossWeights(lam=1e-2))
        return terms.total

    return build, [*seg_inputs, *ref_inputs, images]


def cases(seed: int = 0):
    """(name, build, inputs) for every check."""
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-1, 1, shape)
    proj = np.random.default_rng(seed + 1)
    P = lambda f: _projected(f, proj)

    k_slice = RefineParams.create().k_slice

    out = [
        ("conv2d_same", P(lambda l: tc.conv2d(l[0], l[1], l[2], pad="same")), [u(2, 2, 6, 6), u(3, 2, 3, 3), u(3)]),
        ("conv2d_valid", P(lambda l: tc.conv2d(l[0], l[1], pad="valid")), [u(1, 2, 7, 6), u(2, 2, 3, 3)]),
        ("conv2d_dilated", P(lambda l: tc.conv2d(l[0], l[1], l[2], pad="same", dilation=2)), [u(1, 2, 8, 8), u(2, 2, 3, 3), u(2)]),
        ("maxpool2", P(lambda l: tc.maxpool2(l[0])), [u(2, 2, 6, 8)]),
        ("upsample4", P(lambda l: tc.upsample4(l[0])), [u(2, 1, 3, 5)]),
        ("batchnorm_train", P(_bn_graph("train")), [u(3, 3, 4, 4), u(3) + 1.5, u(3)]),
        ("batchnorm_infer", P(_bn_graph("infer")), [u(2, 3, 4, 4), u(3) + 1.5, u(3)]),
        ("relu", P(lambda l: tc.relu(l[0])), [u(2, 1, 5, 5)]),
        ("sigmoid_steep", P(lambda l: tc.sigmoid(l[0], k_slice)), [0.05 * u(2, 1, 5, 5)]),
        ("seg_loss", lambda l: L.seg_loss(l[0], l[1], [l[2]], 1e-2, 2), [rng.uniform(0, 1, (2, 1, 6, 6)), (u(2, 1, 6, 6) > 0).astype(float), u(3, 2, 3, 3)]),
        ("slice_loss", lambda l: L.slice_loss(l[0], l[1]), [rng.uniform(0, 1, (2, 1, 6, 6)), (u(2, 1, 6, 6) > 0).astype(float)]),
        ("area_loss", lambda l: L.area_loss(l[0], l[1], [l[2], l[3]]), [rng.uniform(0, 1, (2, 1, 6, 6)), (u(2, 1, 6, 6) > 0).astype(float), np.array(0.1), np.array(0.05)]),
    ]

    def refine_case(fn):
        def build(leaves):
            p = RefineParams.create(t1=0.5, t2=[0.1, 0.05])
            p.t1, p.t2 = leaves[1], [leaves[2], leaves[3]]
            p.head_scale, p.head_bias = leaves[4], leaves[5]
            return fn(leaves[0], p)
        return build

    prob = 0.5 + 0.03 * u(2, 1, 12, 12)
    head = [np.array(0.5), np.array(0.1), np.array(0.05), np.array(20.0), np.array(-1.0)]
    out += [
        ("density_slice", P(refine_case(lambda x, p: density_slice(x, p))), [prob, *head]),
        ("area_filter_stack", P(refine_case(lambda x, p: area_filter_stack(x, p))), [rng.uniform(0, 1, (2, 1, 12, 12)), *head]),
        ("classify_head", P(refine_case(lambda x, p: classify_head(x, p))), [rng.uniform(0, 0.2, (3, 1, 6, 6)), *head]),
        # thresholds sit where no area-layer pre-activation is near the relu kink
        ("refine_score_t1_t2", refine_case(lambda x, p: tc.tsum(classify_head(area_filter_stack(density_slice(x, p), p), p))),
         [0.5 + 0.1 * u(2, 1, 16, 16), np.array(0.5), np.array(0.03), np.array(0.02), np.array(20.0), np.array(-1.0)]),
    ]
    build, inputs = _composite_case()
    out.append(("segnet_refine_total_loss", build, inputs))
    return out


def run_all(seed: int = 0, tolerance: float = TOLERANCE) -> list[tc.GradCheckReport]:
    return [tc.grad_check(build, inputs, tolerance=tolerance, seed=seed, name=name) for name, build, inputs in cases(seed)]
