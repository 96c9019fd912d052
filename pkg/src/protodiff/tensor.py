"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the denoiser, the prototype heads, the perceptual
net) is built from the ops in this module. Tensors wrap a row-major
float64 ndarray; ops record a fresh graph per forward pass and `backward`
consumes it. Forward ops verify their outputs are finite and raise
`NonFiniteError` otherwise, so NaN/Inf never propagates silently.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, GraphError, NonFiniteError

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (sampling, metrics, pushes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: Array, op: str) -> Array:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


class Tensor:
    """A float64 array plus optional gradient tracking.

    `grad` is populated on leaf tensors by `backward`. Non-leaf tensors keep
    references to their parents and a closure computing parent gradients;
    `backward` walks that record once and then frees it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _result(data: Array, op: str, parents: Sequence["Tensor"],
                backward: Callable[[Array], tuple[Array | None, ...]]) -> "Tensor":
        out = Tensor(_check_finite(data, op))
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axes, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


# -- elementwise ops -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return Tensor._result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    return Tensor._result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    return Tensor._result(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, "scale", (a,), lambda g: (g * c,))


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), "relu", (a,),
                          lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._result(a.data * sig, "silu", (a,),
                          lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


# -- matmul / conv ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ ({a.shape} vs {b.shape})")
    return Tensor._result(
        a.data @ b.data, "matmul", (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(xpad: Array, k: int, stride: int, oh: int, ow: int) -> Array:
    b, c = xpad.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xpad[:, :, i:i + stride * (oh - 1) + 1:stride,
                                    j:j + stride * (ow - 1) + 1:stride]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (B,C,H,W) input with an (O,C,k,k) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    b, c, h, w = x.shape
    o, ck, k, k2 = kernel.shape
    if k != k2:
        raise ValueError("conv2d: kernel must be square")
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch (input {c}, kernel {ck})")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d: non-positive output extent")

    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = x.data
    cols = _im2col(xpad, k, stride, oh, ow).reshape(b, c * k * k, oh * ow)
    kflat = kernel.data.reshape(o, c * k * k)
    out = np.matmul(kflat, cols).reshape(b, o, oh, ow)

    def backward(g: Array) -> tuple[Array, Array]:
        gflat = g.reshape(b, o, oh * ow)
        gk = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(kflat.T, gflat)
        gcols = gcols.reshape(b, c, k, k, oh, ow)
        gxpad = np.zeros_like(xpad)
        for i in range(k):
            for j in range(k):
                gxpad[:, :, i:i + stride * (oh - 1) + 1:stride,
                      j:j + stride * (ow - 1) + 1:stride] += gcols[:, :, i, j]
        if padding:
            gx = gxpad[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxpad
        return gx, gk

    return Tensor._result(out, "conv2d", (x, kernel), backward)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes) or any(a >= ndim for a in axes):
        raise ValueError(f"invalid reduction axes {axes} for ndim {ndim}")
    return axes


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.data.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def backward(g: Array) -> tuple[Array]:
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor._result(out, "sum", (a,), backward)


def tmean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if a.data.ndim else 1
    if count == 0:
        raise ValueError("mean over empty axes")
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def tmax(a: Tensor, axis: int | None = None) -> tuple[Tensor, Array]:
    """Max reduction. Returns (values, argmax indices); flat index when axis is None.

    Ties break to the smallest row-major index (np.argmax convention).
    """
    if a.data.size == 0:
        raise ValueError("max of empty tensor")
    if axis is None:
        idx = int(np.argmax(a.data))
        out = a.data.reshape(-1)[idx]

        def backward(g: Array) -> tuple[Array]:
            ga = np.zeros_like(a.data).reshape(-1)
            ga[idx] += np.asarray(g).reshape(())
            return (ga.reshape(a.shape),)

        return Tensor._result(np.asarray(out), "max", (a,), backward), np.asarray(idx)

    axis = axis % a.data.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g: Array) -> tuple[Array]:
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return Tensor._result(out, "max", (a,), backward), idx


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; invariant under constant shifts of the input."""
    if a.data.size == 0:
        raise ValueError("softmax of empty tensor")
    axis = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> tuple[Array]:
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._result(out, "softmax", (a,), backward)


# -- structural ops -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty sequence")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g: Array) -> tuple[Array, ...]:
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, "concat", tuple(tensors), backward)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (B,C,H,W) tensor."""
    if a.data.ndim != 4:
        raise ValueError("upsample2x expects a 4-D tensor")
    b, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g: Array) -> tuple[Array]:
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._result(out, "upsample2x", (a,), backward)


# -- backward pass --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tracked leaf reachable from `loss`.

    The graph is consumed: parent records are freed and a second call on the
    same loss raises. Gradients of leaves reached through several paths
    accumulate by summation.
    """
    if loss.data.size != 1:
        raise GraphError("backward requires a scalar loss")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    if not loss.requires_grad:
        raise GraphError("loss does not track a graph")

    # Iterative reverse topological order.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
    loss._consumed = True


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment estimates for a fixed parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One Adam update over `params`; clears their gradients afterwards."""
    for p in params:
        if p.grad is None:
            raise GraphError("adam_step: parameter has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("adam_step: moment shape does not match parameter")
        g = p.grad
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               tolerance: float = 1e-4, h: float = 1e-5,
               max_entries_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare autodiff gradients of scalar `fn(*inputs)` to central differences.

    Probes every entry by default; for large inputs pass
    `max_entries_per_input` to probe a random subset (seeded via `rng`).
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    auto = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_err = 0.0
    n = 0
    for t, a in zip(inputs, auto):
        flat = t.data.reshape(-1)
        indices = range(flat.size)
        if max_entries_per_input is not None and flat.size > max_entries_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(flat.size, size=max_entries_per_input, replace=False)
        for i in indices:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = fn(*inputs).item()
                flat[i] = orig - h
                fm = fn(*inputs).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - fd) / max(1.0, abs(ai), abs(fd))
            if err > max_err:
                max_err = err
            n += 1
    return GradCheckReport(max_rel_err=float(max_err), tolerance=tolerance, n_checked=n)


# -- parameter checkpoints ----------------------------------------------------------

_CKPT_MAGIC = b"PRTODIFF"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | Array]) -> None:
    """Write named parameters as: magic, version u32, count u32, then per
    parameter name (u32 length + UTF-8), rank u32, extents u64 each, and raw
    little-endian float64 data, row-major."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "rb") as f:
        blob = f.read()
    off = len(_CKPT_MAGIC)
    if blob[:off] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        numel = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * numel), dtype="<f8").reshape(shape)
        params[name] = data.astype(np.float64)
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return params


# -- small init helpers shared by the nets -------------------------------------------


def he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> Tensor:
    fan_in = in_ch * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
    return Tensor(w, requires_grad=True)


def he_linear(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
    return Tensor(w, requires_grad=True)
