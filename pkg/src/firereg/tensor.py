"""Dense n-D tensors with reverse-mode differentiation.

Only the operations the registration networks need are provided. Tensors are
channel-first without a batch axis: ``(C, *spatial)``. Storage is float32;
passing float64 arrays gives a 64-bit tensor (used by gradient checks), and
every op keeps the dtype of its inputs.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "concat",
    "conv_nd",
    "dense",
    "activation",
    "tanh",
    "relu",
    "leaky_relu",
    "instance_norm",
    "global_avg_pool",
    "resize_linear",
    "resnet_block",
    "rms",
    "affine_apply",
]


class ShapeError(ValueError):
    pass


_counter = itertools.count()
_grad_mode = contextvars.ContextVar("firereg_grad_mode", default=True)

LEAKY_SLOPE = 0.2


def grad_enabled() -> bool:
    return _grad_mode.get()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for differentiation."""
    token = _grad_mode.set(False)
    try:
        yield
    finally:
        _grad_mode.reset(token)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype), dtype=like.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_mode.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- tape / backward ----------------------------------------------------------
class Tape:
    """Differentiable ops reachable from a scalar, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def replay_backward(self, seed: np.ndarray) -> list[Tensor]:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            visited.append(node)
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return visited


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tensor requiring grad")
    tape = Tape.from_output(loss)
    tape.replay_backward(np.ones(loss.shape, dtype=loss.dtype))
    return tape


# -- elementwise and structural ops -------------------------------------------
def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def _neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * a.dtype.type(s), (a,), lambda g: (g * s,), "scale")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * ad * g,), "square")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),),
        "sum",
    )


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
        "mean",
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _result(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- network layers -----------------------------------------------------------
def conv_nd(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """N-D cross-correlation of ``x`` (C_in, *S) with ``kernels`` (C_out, C_in, *k).

    ``padding="same"`` zero-pads by ``(k-1)//2`` before and ``k//2`` after each
    axis, so stride 1 keeps the extents and stride s gives ``ceil(S/s)``.
    """
    nd = x.ndim - 1
    if kernels.ndim != nd + 2 or kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv_nd: input {x.shape} incompatible with kernels {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    c_in, c_out = x.shape[0], kernels.shape[0]
    k = kernels.shape[2:]
    if padding == "same":
        pads = [((kk - 1) // 2, kk // 2) for kk in k]
    else:
        pads = [(0, 0)] * nd
    xp = np.pad(x.data, [(0, 0)] + pads) if any(p != (0, 0) for p in pads) else x.data
    if any(xp.shape[1 + i] < k[i] for i in range(nd)):
        raise ShapeError(f"conv_nd: kernel {k} larger than padded input {xp.shape[1:]}")
    win = sliding_window_view(xp, k, axis=tuple(range(1, nd + 1)))
    if stride > 1:
        win = win[(slice(None),) + (slice(None, None, stride),) * nd]
    out_sp = win.shape[1 : 1 + nd]
    n_out = int(np.prod(out_sp))
    perm = (0,) + tuple(range(1 + nd, 1 + 2 * nd)) + tuple(range(1, 1 + nd))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(c_in * int(np.prod(k)), n_out)
    w2 = kernels.data.reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv_nd: bias {bias.shape} does not match {c_out} kernels")
        out += bias.data[:, None]
    out = out.reshape((c_out,) + out_sp)

    def bw(g):
        g2 = g.reshape(c_out, n_out)
        gx = gw = gb = None
        if kernels.requires_grad:
            gw = (g2 @ cols.T).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape((c_in,) + tuple(k) + out_sp)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for off in np.ndindex(*k):
                sl = (slice(None),) + tuple(
                    slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
                )
                dxp[sl] += dcols[(slice(None),) + off]
            crop = (slice(None),) + tuple(
                slice(lo, dxp.shape[1 + i] - hi) for i, (lo, hi) in enumerate(pads)
            )
            gx = dxp[crop]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return _result(out, parents, bw, "conv_nd")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer ``W @ x + b`` on a flat vector."""
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    xd, wd = x.data, weights.data

    def bw(g):
        return (wd.T @ g, np.outer(g, xd), g)

    return _result(wd @ xd + bias.data, (x, weights, bias), bw, "dense")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    # subgradient at 0 is alpha
    slope = np.where(x.data > 0, 1, alpha).astype(x.dtype)
    return _result(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def activation(x: Tensor, kind: str = "relu", alpha: float = LEAKY_SLOPE) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    raise ValueError(f"unknown activation {kind!r}")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel to zero mean and unit variance over its spatial axes."""
    if x.ndim < 2 or int(np.prod(x.shape[1:])) < 2:
        raise ShapeError(f"instance_norm needs at least 2 spatial points, got {x.shape}")
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y.astype(x.dtype), (x,), bw, "instance_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (C, *spatial) -> (C,)."""
    spatial = x.shape[1:]
    n = int(np.prod(spatial))
    axes = tuple(range(1, x.ndim))

    def bw(g):
        return (np.broadcast_to((g / n).reshape((-1,) + (1,) * len(spatial)), x.shape).copy(),)

    return _result(x.data.mean(axis=axes), (x,), bw, "global_avg_pool")


def _interp_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners lookup: output i reads src[i0] + t * (src[i1] - src[i0])."""
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    i0, i1, t = _interp_weights(src, dst)
    m = np.zeros((dst, src))
    np.add.at(m, (np.arange(dst), i0), 1 - t)
    np.add.at(m, (np.arange(dst), i1), t)
    return m


def _lerp_axis(a: np.ndarray, axis: int, dst: int) -> np.ndarray:
    i0, i1, t = _interp_weights(a.shape[axis], dst)
    shape = [1] * a.ndim
    shape[axis] = dst
    v0 = np.take(a, i0, axis=axis)
    v1 = np.take(a, i1, axis=axis)
    return v0 + t.reshape(shape).astype(a.dtype) * (v1 - v0)


def resize_linear(x: Tensor, target_spatial: Sequence[int]) -> Tensor:
    """Multi-linear resize with the align-corners convention.

    Constants are reproduced exactly and an unchanged extent is a no-op.
    """
    target = tuple(int(t) for t in target_spatial)
    if len(target) != x.ndim - 1 or any(t < 1 for t in target):
        raise ShapeError(f"resize_linear: bad target {target} for input {x.shape}")
    if target == x.shape[1:]:
        return x
    out = x.data
    axes = [ax for ax in range(1, x.ndim) if x.shape[ax] != target[ax - 1]]
    for ax in axes:
        out = _lerp_axis(out, ax, target[ax - 1])
    src = x.shape

    def bw(g):
        for ax in reversed(axes):
            m = _interp_matrix(src[ax], target[ax - 1]).astype(g.dtype)
            g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [ax])), 0, ax)
        return (g,)

    return _result(out, (x,), bw, "resize_linear")


def resnet_block(x: Tensor, params: dict, act: str = "relu", eps: float = 1e-5) -> Tensor:
    """``x + IN(conv(act(IN(conv(x)))))`` with two same-padded convolutions.

    ``params`` holds ``w1, w2`` and optionally ``b1, b2``.
    """
    if params["w1"].shape[1] != x.shape[0] or params["w2"].shape[0] != x.shape[0]:
        raise ShapeError(
            f"resnet_block: {x.shape[0]} input channels vs kernels "
            f"{params['w1'].shape} / {params['w2'].shape}"
        )
    h = conv_nd(x, params["w1"], params.get("b1"))
    h = activation(instance_norm(h, eps), act)
    h = instance_norm(conv_nd(h, params["w2"], params.get("b2")), eps)
    return x + h


def rms(a: Tensor, b: Tensor) -> Tensor:
    """Root-mean-square difference; the gradient at a == b is taken as zero."""
    _same_shape(a, b, "rms")
    diff = a.data - b.data
    n = diff.size
    val = np.sqrt(np.mean(diff * diff, dtype=np.float64))

    def bw(g):
        if val == 0:
            z = np.zeros_like(diff)
            return (z, z)
        ga = (g / (n * val)) * diff
        return (ga.astype(diff.dtype), (-ga).astype(diff.dtype))

    return _result(np.asarray(val, dtype=diff.dtype), (a, b), bw, "rms")


def affine_apply(matrix: Tensor, coords: Tensor) -> Tensor:
    """Apply an n x (n+1) matrix to homogeneous coordinates.

    ``coords`` is (n, *grid); the result is ``M[:, :n] @ p + M[:, n]`` per point.
    """
    n = coords.shape[0]
    if matrix.shape != (n, n + 1):
        raise ShapeError(f"affine_apply: matrix {matrix.shape} vs {n}-D coordinates")
    grid_shape = coords.shape[1:]
    p = coords.data.reshape(n, -1)
    m = matrix.data
    lin = m[:, :n]
    # explicit accumulation keeps the identity matrix exact
    out = np.empty_like(p)
    for i in range(n):
        row = m[i, n] + lin[i, 0] * p[0]
        for j in range(1, n):
            row = row + lin[i, j] * p[j]
        out[i] = row

    def bw(g):
        g2 = g.reshape(n, -1)
        gm = np.concatenate([g2 @ p.T, g2.sum(axis=1, keepdims=True)], axis=1)
        gp = (lin.T @ g2).reshape(coords.shape)
        return (gm.astype(m.dtype), gp)

    return _result(out.reshape((n,) + grid_shape), (matrix, coords), bw, "affine_apply")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
