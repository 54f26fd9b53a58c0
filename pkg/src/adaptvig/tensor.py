"""Dense float64 tensors with a reverse-mode tape.

Feature maps are NCHW arrays. Attention and the classifier head also need
token matrices, logits and scalar losses, so a ``Tensor`` may hold any shape;
the NCHW contract is checked by the ops that require it.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

AXES = {"height": 2, "width": 3, 2: 2, 3: 3}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; all of these route through the taped primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def check_nchw(x: Tensor, name: str = "x") -> None:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ValueError(f"{name} must be a rank-4 NCHW tensor with all dims >= 1, got {x.shape}")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents)
    out._backward = None
    out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# tape


class Tape:
    """Operations reachable from ``root`` in an order where every node
    follows all of its inputs. Reversing it gives the adjoint schedule."""

    def __init__(self, root: Tensor):
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
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents and n.requires_grad]

    def replay(self) -> None:
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward()


def backward(loss: Tensor) -> Tape:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    # intermediate grads are per-pass; leaf grads accumulate across passes
    for node in tape.nodes:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    tape.replay()
    return tape


# --------------------------------------------------------------------------
# pointwise


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == b.ndim == 4:
        sa, sb = a.shape, b.shape
        if sa[0] == sb[0] and sa[2:] == sb[2:] and (sa[1] == 1 or sb[1] == 1):
            return
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")

    def _bw():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), "sub")

    def _bw():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")

    def _bw():
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), "div")

    def _bw():
        _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out._backward = _bw
    return out


def maximum(a, b) -> Tensor:
    """Pointwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    first = a.data >= b.data
    out = _make(np.where(first, a.data, b.data), (a, b), "max")

    def _bw():
        g = out.grad
        _accum(a, _unbroadcast(np.where(first, g, 0.0), a.shape))
        _accum(b, _unbroadcast(np.where(first, 0.0, g), b.shape))

    out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    out = _make(np.exp(x.data), (x,), "exp")

    def _bw():
        _accum(x, out.grad * out.data)

    out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _make(y, (x,), "sigmoid")

    def _bw():
        _accum(x, out.grad * y * (1.0 - y))

    out._backward = _bw
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    u = _SQRT_2_OVER_PI * (v + _GELU_C * v**3)
    t = np.tanh(u)
    out = _make(0.5 * v * (1.0 + t), (x,), "gelu")

    def _bw():
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
        _accum(x, out.grad * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))

    out._backward = _bw
    return out


def absolute(x: Tensor) -> Tensor:
    out = _make(np.abs(x.data), (x,), "abs")

    def _bw():
        _accum(x, out.grad * np.sign(x.data))

    out._backward = _bw
    return out


_BINARY = {"max": maximum, "sub": sub, "mul": mul}
_UNARY = {"exp": exp, "gelu": gelu}


def elementwise(x: Tensor, y=None, kind: str = "max") -> Tensor:
    """Checked entry point for the pointwise kernels.

    Binary kinds accept equal shapes, a scalar, or an NCHW operand with one
    channel that broadcasts over the other's channels.
    """
    if kind in _UNARY:
        if y is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](x)
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if y is None:
        raise ValueError(f"{kind} needs a second operand")
    y = as_tensor(y)
    _check_broadcast(x, y)
    return _BINARY[kind](x, y)


def roll(x: Tensor, shift: int, axis) -> Tensor:
    """Cyclic shift: ``out[..., i] = x[..., (i - shift) mod n]``."""
    check_nchw(x)
    if axis not in AXES:
        raise ValueError(f"axis must be 'height' or 'width', got {axis!r}")
    ax = AXES[axis]
    s = int(shift) % x.shape[ax]
    out = _make(np.roll(x.data, s, axis=ax), (x,), "roll")

    def _bw():
        _accum(x, np.roll(out.grad, -s, axis=ax))

    out._backward = _bw
    return out


# --------------------------------------------------------------------------
# reductions and reshapes


def total(x: Tensor) -> Tensor:
    out = _make(np.array(x.data.sum()), (x,), "sum")

    def _bw():
        _accum(x, np.broadcast_to(out.grad, x.shape))

    out._backward = _bw
    return out


def reduce_abs_sum_channels(x: Tensor) -> Tensor:
    """Per-pixel L1 norm over channels, shape (n,1,h,w)."""
    check_nchw(x)
    out = _make(np.abs(x.data).sum(axis=1, keepdims=True), (x,), "abs_sum_c")

    def _bw():
        _accum(x, out.grad * np.sign(x.data))

    out._backward = _bw
    return out


def reduce_l2_channels(x: Tensor) -> Tensor:
    """Per-pixel L2 norm over channels; subgradient 0 where the norm is 0."""
    check_nchw(x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    out = _make(norm, (x,), "l2_c")

    def _bw():
        safe = np.where(norm > 0, norm, 1.0)
        _accum(x, np.where(norm > 0, out.grad * x.data / safe, 0.0))

    out._backward = _bw
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    check_nchw(a, "a")
    check_nchw(b, "b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"cannot concat {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat")

    def _bw():
        _accum(a, out.grad[:, :ca])
        _accum(b, out.grad[:, ca:])

    out._backward = _bw
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(x.data.reshape(shape), (x,), "reshape")

    def _bw():
        _accum(x, out.grad.reshape(x.shape))

    out._backward = _bw
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose")

    def _bw():
        _accum(x, out.grad.transpose(inv))

    out._backward = _bw
    return out


def to_tokens(x: Tensor) -> Tensor:
    """(n,c,h,w) -> (n, h*w, c), tokens in row-major pixel order."""
    check_nchw(x)
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, hw, c = t.shape
    if hw != h * w:
        raise ValueError(f"{hw} tokens cannot fill a {h}x{w} grid")
    return reshape(transpose(t, (0, 2, 1)), (n, c, h, w))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")

    def _bw():
        g = out.grad
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out._backward = _bw
    return out


def softmax_lastaxis(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (x,), "softmax")

    def _bw():
        g = out.grad
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = _bw
    return out


# --------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """Cross-correlation with padding ``k // 2``.

    ``weight`` is (c_out, c_in // groups, k, k); ``groups`` is 1 or c_in
    (depthwise, which also requires c_out == c_in).
    """
    check_nchw(x)
    n, c, h, w = x.shape
    co, cig, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    depthwise = groups != 1
    if depthwise:
        if groups != c or co != c or cig != 1:
            raise ValueError(f"depthwise conv needs groups=c_in=c_out and weight (c,1,k,k); got groups={groups}, weight {weight.shape}, c_in={c}")
    elif cig != c:
        raise ValueError(f"weight expects {cig} input channels, input has {c}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"bias must have shape ({co},), got {bias.shape}")

    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    W = weight.data
    pointwise = k == 1 and stride == 1

    if pointwise:
        if depthwise:
            y = x.data * W[:, 0, 0, 0][None, :, None, None]
        else:
            y = np.tensordot(W[:, :, 0, 0], x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
        patches = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        patches = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        if depthwise:
            y = np.einsum("nchwij,cij->nchw", patches, W[:, 0], optimize=True)
        else:
            y = np.tensordot(patches, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(np.ascontiguousarray(y), parents, "conv2d")

    def _bw():
        g = out.grad
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if pointwise:
            if depthwise:
                _accum(weight, (g * x.data).sum(axis=(0, 2, 3)).reshape(W.shape))
                _accum(x, g * W[:, 0, 0, 0][None, :, None, None])
            else:
                gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
                _accum(weight, gw.reshape(W.shape))
                _accum(x, np.tensordot(W[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3))
            return
        if depthwise:
            _accum(weight, np.einsum("nchw,nchwij->cij", g, patches, optimize=True)[:, None])
            gp = np.einsum("nchw,cij->nchwij", g, W[:, 0], optimize=True)
        else:
            _accum(weight, np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3])))
            gp = np.tensordot(g, W, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        if not x.requires_grad:
            return
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gp[..., i, j]
        _accum(x, gxp[:, :, pad : pad + h, pad : pad + w])

    out._backward = _bw
    return out


def normalize(
    x: Tensor,
    mode: str = "per_sample_all",
    gain: Tensor | None = None,
    shift: Tensor | None = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """Standardize with population variance, then apply a per-channel affine.

    ``per_sample_all`` uses statistics over (c,h,w) of each sample;
    ``per_token_channel`` uses each pixel's channel vector. Token matrices
    (n, N, c) are accepted in ``per_token_channel`` mode and normalized over
    their last axis.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode == "per_sample_all":
        check_nchw(x)
        axes, cax = (1, 2, 3), 1
    elif mode == "per_token_channel":
        if x.ndim == 4:
            axes, cax = (1,), 1
        elif x.ndim == 3:
            axes, cax = (2,), 2
        else:
            raise ValueError(f"per_token_channel needs NCHW or (n,N,c) input, got {x.shape}")
    else:
        raise ValueError(f"unknown normalize mode {mode!r}")

    v = x.data
    mean = v.mean(axis=axes, keepdims=True)
    flat = v.max(axis=axes, keepdims=True) == v.min(axis=axes, keepdims=True)
    xc = np.where(flat, 0.0, v - mean)  # exact zeros for constant groups
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    aff_shape = [1] * x.ndim
    aff_shape[cax] = x.shape[cax]
    sum_axes = tuple(a for a in range(x.ndim) if a != cax)
    y = xhat
    if gain is not None:
        y = y * gain.data.reshape(aff_shape)
    if shift is not None:
        y = y + shift.data.reshape(aff_shape)
    parents = [x] + [p for p in (gain, shift) if p is not None]
    out = _make(y, parents, "normalize")

    def _bw():
        g = out.grad
        if shift is not None:
            _accum(shift, g.sum(axis=sum_axes))
        if gain is not None:
            _accum(gain, (g * xhat).sum(axis=sum_axes))
            g = g * gain.data.reshape(aff_shape)
        if x.requires_grad:
            gx = inv * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True))
            _accum(x, gx)

    out._backward = _bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(n,c,h,w) -> (n,c)."""
    check_nchw(x)
    n, c, h, w = x.shape
    out = _make(x.data.mean(axis=(2, 3)), (x,), "avgpool")

    def _bw():
        _accum(x, np.broadcast_to(out.grad[:, :, None, None] / (h * w), x.shape))

    out._backward = _bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(n, d_in) @ weight(d_out, d_in)^T + bias."""
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(y, parents, "linear")

    def _bw():
        g = out.grad
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    out._backward = _bw
    return out


def head_primitives(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.shape[0] < 1:
        raise ValueError("class count must be >= 1")
    return linear(global_avg_pool(x), weight, bias)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _make(np.array(-logp[np.arange(n), labels].mean()), (logits,), "xent")

    def _bw():
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, out.grad * p / n)

    out._backward = _bw
    return out


# --------------------------------------------------------------------------
# finite differences


def fd_check(
    f: Callable[[], Tensor],
    leaf: Tensor,
    eps: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the taped gradient of ``f`` w.r.t. ``leaf``
    and central differences. ``f`` must rebuild its graph on every call.

    Leaves ``leaf.grad`` holding the analytic gradient.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    leaf.grad = None
    backward(f())
    analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
    flat = leaf.data.reshape(-1)
    if not np.shares_memory(flat, leaf.data):
        raise ValueError("leaf data must be contiguous")
    idx = range(leaf.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    leaf.grad = analytic
    return worst


# --------------------------------------------------------------------------
# AVGT container

MAGIC = b"AVGT"


def save_tensor(path: str | Path, x) -> None:
    """Write an NCHW array as magic + u32 rank + 4 u32 dims + f32 payload (LE)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"AVGT stores rank-4 tensors, got shape {arr.shape}")
    header = MAGIC + struct.pack("<5I", 4, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an AVGT file")
    rank, *dims = struct.unpack_from("<5I", raw, 4)
    if rank != 4:
        raise ValueError(f"{path}: rank {rank} unsupported")
    count = int(np.prod(dims))
    payload = raw[24:]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: expected {count} values, found {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
