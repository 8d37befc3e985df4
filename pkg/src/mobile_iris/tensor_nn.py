"""
Minimal dense-tensor core with reverse-mode autodiff.

Only the layer kinds the Mobile-UNet needs are provided: standard,
depthwise, pointwise and transposed convolutions, batch normalization,
ReLU6, sigmoid, the inverted-residual block, and an Adam optimizer.

Array layout is channels-first. Every spatial op accepts either a single
image ``(C, H, W)`` or a batch ``(N, C, H, W)`` and returns the same rank.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, StateError

LAYER_KINDS = (
    "standard_conv",
    "depthwise_conv",
    "pointwise_conv",
    "transposed_conv",
    "inverted_residual",
    "batchnorm",
    "relu6",
    "sigmoid",
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),),
    )


def relu6(x) -> Tensor:
    """Elementwise ``min(max(x, 0), 6)``."""
    x = as_tensor(x)
    out = np.clip(x.data, 0, 6)
    mask = (x.data > 0) & (x.data < 6)
    return _make(out, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form: stable for large |x| and exactly 0.5 at 0
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*k*k, ho*wo)."""
    n, c = xp.shape[:2]
    if k == 1:
        patches = xp[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        return np.ascontiguousarray(patches).reshape(n, c, ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back into a (N, C, Hp, Wp) array."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, i, j]
    return out


def _check_window(h: int, w: int, k: int, padding: int):
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{w} (padding {padding})")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with ``weight`` of shape (C_out, C_in, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    xd, squeeze = _batched(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be (C_out, C_in, k, k), got {weight.shape}")
    co, ci, k, _ = weight.shape
    if xd.shape[1] != ci:
        raise DimensionError(f"input shape {x.shape} has {xd.shape[1]} channels but weight shape {weight.shape} expects {ci}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    n, _, h, w = xd.shape
    _check_window(h, w, k, padding)
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = _pad(xd, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(co, -1)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g3 = g4.reshape(n, co, ho * wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g3)
        gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def depthwise_conv2d(x, weight, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Per-channel convolution with ``weight`` of shape (C, 1, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    xd, squeeze = _batched(x)
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise DimensionError(f"depthwise weight must be (C, 1, k, k), got {weight.shape}")
    c, _, k, _ = weight.shape
    if xd.shape[1] != c:
        raise DimensionError(f"input shape {x.shape} has {xd.shape[1]} channels but depthwise weight shape {weight.shape} has {c}")
    n, _, h, w = xd.shape
    _check_window(h, w, k, padding)
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = _pad(xd, padding)
    wd = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xd, wd))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += patch * wd[:, i, j].reshape(1, c, 1, 1)
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gw = np.zeros_like(weight.data)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                gw[:, 0, i, j] = (g4 * xp[:, :, rows, cols]).sum(axis=(0, 2, 3))
                gxp[:, :, rows, cols] += g4 * wd[:, i, j].reshape(1, c, 1, 1)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution with ``weight`` of shape (C_in, C_out, k, k).

    This is the adjoint of :func:`conv2d` using the same weight array.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    xd, squeeze = _batched(x)
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"transposed conv weight must be (C_in, C_out, k, k), got {weight.shape}")
    ci, co, k, _ = weight.shape
    if xd.shape[1] != ci:
        raise DimensionError(f"input shape {x.shape} has {xd.shape[1]} channels but weight shape {weight.shape} expects {ci}")
    n, _, h, w = xd.shape
    ho = conv_transpose_output_size(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"transposed conv output size {ho}x{wo} is not positive")
    full = (n, co, (h - 1) * stride + k + output_padding, (w - 1) * stride + k + output_padding)
    w2 = weight.data.reshape(ci, co * k * k)
    cols = np.matmul(w2.T, xd.reshape(n, ci, h * w))
    canvas = _col2im(cols, full, k, stride, h, w)
    out = canvas[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gcanvas = np.zeros(full, dtype=g4.dtype)
        gcanvas[:, :, padding : padding + ho, padding : padding + wo] = g4
        gcols = _im2col(gcanvas, k, stride, h, w)
        gx = np.matmul(w2, gcols).reshape(n, ci, h, w)
        gw = np.tensordot(xd.reshape(n, ci, h * w), gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "infer",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In ``train`` mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in ``infer`` mode the running
    statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, squeeze = _batched(x)
    c = xd.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise DimensionError(f"batchnorm {label} has shape {np.shape(arr)}, expected ({c},)")
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if count == 0:
        raise DimensionError(f"batchnorm on zero-size input {x.shape}")
    bshape = (1, c, 1, 1)
    g_ = gamma.data.reshape(bshape)

    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    elif mode == "infer":
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(bshape)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * invstd
    out = xhat * g_ + beta.data.reshape(bshape)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        ggamma = (g4 * xhat).sum(axis=(0, 2, 3))
        gbeta = g4.sum(axis=(0, 2, 3))
        dxhat = g4 * g_
        if mode == "train":
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = invstd / count * (count * dxhat - sum_d - xhat * sum_dx)
        else:
            gx = dxhat * invstd
        return [gx[0] if squeeze else gx, ggamma, gbeta]

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Layer specs and the inverted-residual block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    k: int = 1
    s: int = 1
    t: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.s < 1:
            raise ValueError(f"k and s must be >= 1, got k={self.k}, s={self.s}")
        if self.kind == "inverted_residual" and self.t < 1:
            raise ValueError(f"expansion t must be >= 1, got {self.t}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def has_residual(self) -> bool:
        return self.kind == "inverted_residual" and self.s == 1 and self.in_channels == self.out_channels

    @property
    def hidden_channels(self) -> int:
        return self.in_channels * self.t


def inverted_residual_param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes of one inverted-residual block.

    The 1x1 expansion is omitted when ``t == 1`` (the first MobileNetV2
    bottleneck has none).
    """
    cin, cout, hid, k = spec.in_channels, spec.out_channels, spec.hidden_channels, spec.k
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.t != 1:
        shapes["expand.weight"] = (hid, cin, 1, 1)
        shapes["expand.bn.gamma"] = (hid,)
        shapes["expand.bn.beta"] = (hid,)
    shapes["dw.weight"] = (hid, 1, k, k)
    shapes["dw.bn.gamma"] = (hid,)
    shapes["dw.bn.beta"] = (hid,)
    shapes["project.weight"] = (cout, hid, 1, 1)
    shapes["project.bn.gamma"] = (cout,)
    shapes["project.bn.beta"] = (cout,)
    return shapes


def _maybe_bn(y: Tensor, params, buffers, prefix: str, mode: str) -> Tensor:
    if f"{prefix}.gamma" not in params:
        return y
    return batchnorm(
        y,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        buffers[f"{prefix}.running_mean"],
        buffers[f"{prefix}.running_var"],
        mode=mode,
    )


def inverted_residual(x, spec: LayerSpec, params: dict, buffers: dict | None = None, mode: str = "infer") -> Tensor:
    """Expand (1x1) -> ReLU6 -> depthwise kxk -> ReLU6 -> project (1x1), linear output.

    ``params`` maps the names from :func:`inverted_residual_param_shapes`
    to tensors. Batch-norm entries are optional; when present, ``buffers``
    must carry the matching running statistics.
    """
    if spec.kind != "inverted_residual":
        raise ValueError(f"spec.kind must be 'inverted_residual', got {spec.kind!r}")
    x = as_tensor(x)
    buffers = buffers or {}
    y = x
    if "expand.weight" in params:
        y = relu6(_maybe_bn(conv2d(y, params["expand.weight"]), params, buffers, "expand.bn", mode))
    pad = spec.padding if spec.padding else spec.k // 2
    y = relu6(_maybe_bn(depthwise_conv2d(y, params["dw.weight"], spec.s, pad), params, buffers, "dw.bn", mode))
    y = _maybe_bn(conv2d(y, params["project.weight"]), params, buffers, "project.bn", mode)
    if spec.has_residual:
        y = add(x, y)
    return y


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode accumulation from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires grad. When ``params`` is
    given, returns their gradients in order; parameters the loss does not
    depend on get zeros.
    """
    if loss._backward is None:
        raise StateError("backward called on a tensor with no recorded forward graph")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._backward is not None):
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float = 1e-4):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise DimensionError(
            f"got {len(params)} params, {len(grads)} grads, {len(state.first_moment)} moment slots"
        )
    for p, g, m in zip(params, grads, state.first_moment):
        if np.shape(g) != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter shape {p.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.dtype)
    return params, state
