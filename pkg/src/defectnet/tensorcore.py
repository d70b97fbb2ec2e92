"""Small reverse-mode autodiff core over numpy arrays.

Only the handful of layers the detector needs are provided: stride-1
convolution (optionally dilated), 2x2 max pooling, fixed bilinear x4
upsampling, batch normalization, relu/steep sigmoid and a few elementwise
and reduction ops. Maps use the (batch, channel, height, width) layout.

Training runs in float32. ``precision(np.float64)`` switches newly created
tensors to float64, which the finite-difference checker relies on.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def deterministic():
    """Pin BLAS to one thread so every reduction runs in a fixed order."""
    with threadpool_limits(limits=1):
        yield


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; every op returns a new Tensor that keeps
    references to its inputs and a closure mapping the output gradient to
    input gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, *, _parents=(), _op="leaf", _backward=None):
        # op outputs keep their dtype; leaves adopt the active default
        self.data = np.asarray(data) if _op != "leaf" else np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = _op
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward) -> Tensor:
    return Tensor(data, _parents=parents, _op=op, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), "div", backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return _node(x.data * x.data, (x,), "square", backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), "sum", backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / count)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor, k: float = 1.0) -> Tensor:
    """Logistic ``1 / (1 + exp(-k x))``; large ``k`` approximates a step at 0."""
    if k <= 0:
        raise ValueError(f"sigmoid steepness must be positive, got {k}")
    s = _stable_sigmoid(np.asarray(k * x.data, dtype=x.dtype))

    def backward(g):
        return (g * k * s * (1.0 - s),)

    return _node(s, (x,), "sigmoid", backward)


def activation(x: Tensor, kind: str, k: float = 1.0) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x, k)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# convolution, pooling, upsampling
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, dilation: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dilation:i * dilation + ho, j * dilation:j * dilation + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, pad: str = "same", dilation: int = 1) -> Tensor:
    """Stride-1 cross-correlation (no kernel flip).

    ``same`` zero-pads so the output keeps the input's spatial size;
    ``valid`` shrinks each spatial dim by the effective kernel extent - 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got input {x.shape} and kernel {kernel.shape}")
    out_c, in_c, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != in_c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel spatial dims must be odd, got kernel {kernel.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_c,):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if pad not in ("same", "valid"):
        raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")

    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    if pad == "same":
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        ho, wo = h, w
    else:
        xp = x.data
        ho, wo = h - 2 * ph, w - 2 * pw
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d 'valid' output would be empty for input {x.shape} and kernel {kernel.shape}")

    cols = _im2col(xp, kh, kw, ho, wo, dilation)
    wmat = kernel.data.reshape(out_c, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, out_c, ho, wo)

    def backward(g):
        g2 = g.reshape(n, out_c, ho * wo)
        gk = np.einsum("nol,nkl->ok", g2, cols).reshape(kernel.shape)
        gcols = np.matmul(wmat.T, g2).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i * dilation:i * dilation + ho, j * dilation:j * dilation + wo] += gcols[:, :, i, j]
        if pad == "same":
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        else:
            gx = gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, "conv2d", backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {x.shape}; pad the input first")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _node(out, (x,), "maxpool2", backward)


def bilinear_matrix(n_in: int, factor: int = 4, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (n_in*factor, n_in), half-pixel centres.

    Output sample ``o`` reads source coordinate ``(o + 0.5)/factor - 0.5``,
    clamped to the valid range at both ends.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def upsample4(x: Tensor) -> Tensor:
    """Fixed bilinear upsampling by 4 in both spatial dims."""
    n, c, h, w = x.shape
    uh = bilinear_matrix(h, 4, x.dtype)
    uw = bilinear_matrix(w, 4, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _node(out, (x,), "upsample4", backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer; ``None`` until populated."""
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, state: BatchNormState) -> Tensor:
    """Per-channel normalization.

    In ``train`` mode batch moments are used and the running statistics are
    blended as ``running = momentum * running + (1 - momentum) * batch``.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params {gamma.shape}/{beta.shape} do not match input {x.shape}")
    bshape = (1, c, 1, 1)
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state.running_mean is None:
            state.running_mean = mu.copy()
            state.running_var = var.copy()
        else:
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(state.running_mean.dtype)
            state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    elif mode == "infer":
        if state.running_mean is None:
            raise RuntimeError("batchnorm in infer mode before any training step: running statistics are empty")
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    count = n * h * w

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(bshape)
        if mode == "train":
            gx = (inv_std.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _node(out.astype(x.dtype), (x, gamma, beta), "batchnorm", backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(node) for every node that requires grad.

    Leaf gradients land in ``.grad``. When ``wrt`` is given, their gradients
    are returned in the same order (zeros for tensors the loss ignores).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new array and the advanced state."""
    if param.shape != grad.shape:
        raise ShapeError(f"adam_step: parameter {param.shape} vs gradient {grad.shape}")
    m = np.zeros_like(param) if state.m is None else state.m
    v = np.zeros_like(param) if state.v is None else state.v
    t = state.t + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m.astype(param.dtype), v.astype(param.dtype))
    return new.astype(param.dtype), new_state


@dataclass
class Adam:
    """Adam over a fixed list of leaf tensors; mutates ``tensor.data``."""
    params: list[Tensor]
    lr: float = 1e-3
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [AdamState(lr=self.lr) for _ in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p.data, self.states[i] = adam_step(p.data, g, self.states[i])


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def grad_check(
    build: Callable[[list[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-5,
    step: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    name: str = "",
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``build`` against central differences.

    ``build`` receives float64 leaf tensors (one per input array) and must
    return a scalar. Per input, up to ``max_coords`` coordinates are probed
    (all of them when the input is smaller).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        analytic = backward(build(leaves), wrt=leaves)

        def evaluate() -> float:
            return float(build([Tensor(a) for a in arrays]).data)

        worst, checked = 0.0, 0
        for arr, grad in zip(arrays, analytic):
            flat = arr.reshape(-1)
            if flat.size <= max_coords:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + step
                f_plus = evaluate()
                flat[idx] = orig - step
                f_minus = evaluate()
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(grad.reshape(-1)[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
                checked += 1
    return GradCheckReport(name, worst, checked, tolerance)
