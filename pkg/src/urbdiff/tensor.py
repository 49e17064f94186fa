"""A minimal reverse-mode autodiff engine on numpy arrays.

Only the operators the Siamese change detector needs are provided. Tensors
store float32 by default (float64 is accepted, which the gradient checker
uses); every reduction is accumulated in float64 and cast back.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from urbdiff.errors import LabelError, NumericFault, ShapeError

ACC = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def _accumulate(self, g: np.ndarray):
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Back-propagate from this tensor; scalar tensors default to d(self)=1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=ACC)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient reaching {node!r}")
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                else:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg


def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _result(data, dtype, parents, backward) -> Tensor:
    out = np.asarray(data).astype(dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise NumericFault("non-finite value produced in forward pass")
    needs = any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _dtype(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


# --------------------------------------------------------------------------
# convolution family


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; keeps spatial size."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (N, C, H, W), got {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernels must be 3x3, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {c_in}")
    n, _, h, w = x.shape
    xp = np.pad(x.data.astype(ACC), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    wd = weight.data.astype(ACC)
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.astype(ACC)[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # N, H, W, C, 3, 3
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + h, j : j + w] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, 1:-1, 1:-1]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, _dtype(*parents), parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 transposed convolution with stride 2: doubles H and W.

    ``weight`` has shape (C_in, C_out, 2, 2), as in the adjoint of a stride-2
    2x2 convolution.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects (N, C, H, W), got {x.shape}")
    c_in, c_out, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("conv_transpose2d kernels must be 2x2")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, weight expects {c_in}")
    n, _, h, w = x.shape
    xd, wd = x.data.astype(ACC), weight.data.astype(ACC)
    t = np.tensordot(xd, wd, axes=([1], [0]))  # N, H, W, Cout, 2, 2
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data.astype(ACC)[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g6 = g.reshape(n, c_out, h, 2, w, 2)
        gx = np.tensordot(g6, wd, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 2, 4]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, _dtype(*parents), parents, backward)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution; ``weight`` is (C_out, C_in)."""
    if x.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1x1: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data.astype(ACC), weight.data.astype(ACC)
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.astype(ACC)[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, _dtype(*parents), parents, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties send the gradient to the first element
    of the block in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=ACC)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _result(out, x.dtype, (x,), backward)


# --------------------------------------------------------------------------
# elementwise and reductions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum propagates NaN so the forward check sees it
    return _result(np.maximum(x.data, 0), x.dtype, (x,), lambda g: (g * mask,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = a.data.astype(ACC) - b.data.astype(ACC)
    return _result(out, _dtype(a, b), (a, b), lambda g: (g, -g))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data).astype(ACC)
    return _result(np.abs(x.data), x.dtype, (x,), lambda g: (g * sign,))


def channel_norm(x: Tensor) -> Tensor:
    """Per-pixel L2 norm over the channel axis, kept as a single channel.

    The gradient at a zero vector is taken as zero.
    """
    xd = x.data.astype(ACC)
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)

    def backward(g):
        return (np.where(norm > 0, g * xd / safe, 0.0),)

    return _result(norm, x.dtype, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    if x.shape[axis] < 2:
        raise ShapeError("log_softmax needs at least two classes")
    xd = x.data.astype(ACC)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, x.dtype, (x,), backward)


def nll_weighted(logp: Tensor, target: np.ndarray, weights=(1.0, 1.0)) -> Tensor:
    """Class-weighted negative log-likelihood, normalised by the summed weights.

    ``logp`` is (N, 2, H, W) log-probabilities, ``target`` an (N, H, W) {0,1} mask.
    """
    t = np.asarray(target)
    if logp.data.ndim != 4 or logp.shape[1] != 2:
        raise ShapeError(f"nll_weighted expects (N, 2, H, W) log-probs, got {logp.shape}")
    if t.shape != (logp.shape[0],) + logp.shape[2:]:
        raise ShapeError(f"target shape {t.shape} does not match log-probs {logp.shape}")
    if not np.isin(t, (0, 1)).all():
        raise LabelError("targets must be 0 or 1")
    t = t.astype(np.int64)
    w = np.asarray(weights, dtype=ACC)[t]
    total = w.sum()
    picked = np.take_along_axis(logp.data.astype(ACC), t[:, None], axis=1)[:, 0]
    loss = -(w * picked).sum() / total

    def backward(g):
        gl = np.zeros(logp.shape, dtype=ACC)
        np.put_along_axis(gl, t[:, None], (-w / total)[:, None], axis=1)
        return (gl * g,)

    return _result(np.array(loss), logp.dtype, (logp,), backward)


# --------------------------------------------------------------------------
# parameters and optimisation


def init_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SGD:
    """Stochastic gradient descent with momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros(p.shape, dtype=ACC) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericFault(f"non-finite gradient for {p.name or p!r}")
        for p, v in zip(self.params, self.velocity):
            g = np.zeros(p.shape, ACC) if p.grad is None else p.grad.astype(ACC)
            v *= self.momentum
            v += g + self.weight_decay * p.data.astype(ACC)
            p.data = (p.data.astype(ACC) - self.lr * v).astype(p.dtype)
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, state: SGD | None = None) -> SGD:
    """One optimiser update; pass the returned state back in to keep momentum."""
    opt = state or SGD(params, lr, momentum, weight_decay)
    opt.step()
    return opt


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_check(op: Callable[..., Tensor], shapes: Sequence[tuple], h: float = 1e-3,
                      seed: int = 0, samples: int = 50,
                      init: Callable[[np.random.Generator, tuple], np.ndarray] | None = None,
                      floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Inputs of the given shapes are drawn in float64 (``init`` overrides the
    standard normal draw); the scalar probed is ``sum(op(*inputs) * R)`` for a
    fixed random ``R``. At least ``samples`` coordinates are checked, spread
    over all inputs (every coordinate if there are fewer).
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError("step h must lie in [1e-5, 1e-2]")
    rng = np.random.default_rng(seed)
    draw = init or (lambda r, s: r.standard_normal(s))
    arrays = [np.asarray(draw(rng, tuple(s)), dtype=np.float64) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    probe = rng.standard_normal(out.shape)
    out.backward(probe)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value():
        res = op(*[Tensor(a) for a in arrays])
        return float((res.data.astype(np.float64) * probe).sum())

    total = sum(a.size for a in arrays)
    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if total > samples:
        pick = rng.choice(total, size=samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        keep = flat[j]
        flat[j] = keep + h
        up = value()
        flat[j] = keep - h
        down = value()
        flat[j] = keep
        num = (up - down) / (2 * h)
        ana = float(analytic[i].reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
