"""Minimal dense-tensor reverse-mode autodiff on float64 numpy arrays.

Covers exactly the operations the fusion model and its CCC loss need:
matmul, transpose, softmax, layer norm, linear, elementwise arithmetic,
relu/tanh, reductions, column/row slicing and concatenation, blocked
multi-head attention kernels, plus a bias-corrected Adam step.

Every value-producing operation checks its output for NaN/Inf and raises
instead of propagating (pure data-movement ops skip the check; their inputs
were checked by their producers). Single-threaded within one graph; tensors
are plain data and safe to hand between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    # single-pass: a finite array in this library's value range sums finite,
    # while any NaN/Inf survives the reduction
    if not math.isfinite(float(arr.sum())):
        raise FloatingPointError(f"{op} produced non-finite values")


class Tensor:
    """Dense row-major float64 tensor; participates in the recorded graph.

    Leaf tensors created with requires_grad=True own a zeroed grad buffer that
    backward() accumulates into; operation outputs receive their grad array
    during the backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...],
            backward_rule: Callable[[np.ndarray], tuple[np.ndarray, ...]],
            check: bool = True) -> Tensor:
    if check:
        _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._backward_done = False
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_rule = backward_rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_rule = None
    return out


@dataclass
class TapeEntry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_rule: Callable[[np.ndarray], tuple[np.ndarray, ...]]


@dataclass
class Tape:
    """Recorded operations in topological order (inputs precede their op)."""

    entries: list[TapeEntry] = field(default_factory=list)


def build_tape(root: Tensor) -> Tape:
    """Collect the grad-requiring subgraph below `root` in topological order."""
    tape = Tape()
    visited: set[int] = set()
    # iterative postorder: children are appended before their consumer
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            if node._backward_rule is not None:
                tape.entries.append(TapeEntry(node._parents, node, node._backward_rule))
            continue
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return tape


def backward(loss: Tensor) -> Tape:
    """Reverse-mode accumulation of d(loss)/d(leaf) into leaf `.grad` buffers.

    `loss` must be a scalar produced by recorded operations. A second
    backward on the same tensor is an error (rerun the forward instead).
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise RuntimeError("backward called twice on the same graph without reset")
    tape = build_tape(loss)
    if not tape.entries:
        raise RuntimeError("backward on empty tape: loss was not produced by recorded ops")
    # transient grads for op outputs; leaves accumulate into their own buffers
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output))
        entry.output.grad = g
        for parent, pg in zip(entry.inputs, entry.backward_rule(g)):
            if not parent.requires_grad:
                continue
            if parent._backward_rule is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                acc = grads.get(id(parent))
                # rules may return views of g; never mutate, always reallocate
                grads[id(parent)] = pg if acc is None else acc + pg
    loss._backward_done = True
    return tape


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise _shape_err("matmul", a.data.shape, b.data.shape)
    out = a.data @ b.data

    def bw(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise _shape_err("transpose", a.data.shape)
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,), check=False)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis` (max subtraction is mandatory)."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    out = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(out, out)
    out /= np.sum(out, axis=axis, keepdims=True)

    def bw(g: np.ndarray):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with biased variance: (x-mu)/sqrt(var+eps)*gain + bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise _shape_err("layer_norm", x.data.shape, gain.data.shape, bias.data.shape)
    mu = np.mean(x.data, axis=1, keepdims=True)
    xhat = x.data - mu
    var = np.mean(xhat * xhat, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gain.data
    out += bias.data

    def bw(g: np.ndarray):
        dgain = np.sum(g * xhat, axis=0)
        dbias = np.sum(g, axis=0)
        dx = g * gain.data
        dx -= np.mean(dx, axis=1, keepdims=True)
        dx -= xhat * np.mean((g * gain.data) * xhat, axis=1, keepdims=True)
        dx *= inv
        return dx, dgain, dbias

    return _record("layer_norm", out, (x, gain, bias), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add, the only broadcasting form supported."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise _shape_err("add_bias", x.data.shape, b.data.shape)
    return _record("add_bias", x.data + b.data, (x, b), lambda g: (g, np.sum(g, axis=0)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add_bias(matmul(x, w), b)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    # same shape, or one operand a scalar
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise _shape_err(op, a.data.shape, b.data.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand in a broadcast op collects the summed gradient
    if shape == ():
        return np.asarray(np.sum(g))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; either operand may be a scalar tensor."""
    _binary_shapes("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a.data.shape),
                              _reduce_to(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):  # non-finite is raised below
        out = a.data / b.data

    def bw(g: np.ndarray):
        return (_reduce_to(g / b.data, a.data.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _record("div", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # subgradient at 0 is 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,), check=False)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),), check=False)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.data.shape
    return _record("sum", np.asarray(np.sum(x.data)), (x,),
                   lambda g: (np.full(shape, float(g)),))


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    shape = x.data.shape
    n = x.data.size
    return _record("mean", np.asarray(np.mean(x.data)), (x,),
                   lambda g: (np.full(shape, float(g) / n),))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise _shape_err(f"slice_cols[{start}:{stop}]", x.data.shape)

    def bw(g: np.ndarray):
        dx = np.zeros(x.data.shape)
        dx[:, start:stop] = g
        return (dx,)

    return _record("slice_cols", x.data[:, start:stop].copy(), (x,), bw, check=False)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 2 or p.data.shape[0] != parts[0].data.shape[0] for p in parts):
        raise _shape_err("concat_cols", *[p.data.shape for p in parts])
    widths = [p.data.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), bw, check=False)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 2 or p.data.shape[1] != parts[0].data.shape[1] for p in parts):
        raise _shape_err("concat_rows", *[p.data.shape for p in parts])
    heights = [p.data.shape[0] for p in parts]
    bounds = np.cumsum([0] + heights)

    def bw(g: np.ndarray):
        return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    return _record("concat_rows", np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), bw, check=False)


# ---------------------------------------------------------------------------
# blocked multi-head attention kernel
#
# Sequences are stored 2-D as [(B*T) x d]: B independent blocks (batch items)
# of T frames. Heads split the feature axis. The whole
# scores -> softmax-over-keys -> weighted-value-sum chain runs as one recorded
# op so the [B*H, T, T] intermediates stay in place; the backward rule is the
# analytic composition of the three stages (validated against finite
# differences by the gradient self-check).


def _split_heads(x: np.ndarray, b: int, t: int, h: int, dh: int) -> np.ndarray:
    # [(B*T) x (H*dh)] -> [(B*H) x T x dh]
    return x.reshape(b, t, h, dh).transpose(0, 2, 1, 3).reshape(b * h, t, dh)


def _merge_heads(x: np.ndarray, b: int, t: int, h: int, dh: int) -> np.ndarray:
    # [(B*H) x T x dh] -> [(B*T) x (H*dh)]
    return x.reshape(b, h, t, dh).transpose(0, 2, 1, 3).reshape(b * t, h * dh)


def _block_dims(op: str, rows: int, d: int, num_heads: int, block_len: int) -> tuple[int, int]:
    if rows % block_len != 0:
        raise _shape_err(f"{op}: rows {rows} not divisible by block_len {block_len}", (rows, d))
    if d % num_heads != 0:
        raise _shape_err(f"{op}: width {d} not divisible by num_heads {num_heads}", (rows, d))
    return rows // block_len, d // num_heads


# score buffers are processed in head chunks small enough to stay cache
# resident; the backward pass recomputes the softmax weights per chunk
# instead of materializing all [B*H, T, T] of them (commodity 2-core boxes
# are memory-bandwidth bound, so recomputation is cheaper than the traffic)
_ATTN_CHUNK = 8


def _chunk_softmax(q3c: np.ndarray, k3c: np.ndarray) -> np.ndarray:
    # q3c carries the 1/sqrt(d_h) factor; max subtraction is mandatory
    s = q3c @ k3c.transpose(0, 2, 1)
    s -= np.max(s, axis=2, keepdims=True)
    np.exp(s, out=s)
    s /= np.sum(s, axis=2, keepdims=True)
    return s


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int, block_len: int) -> Tensor:
    """Blocked multi-head scaled dot-product attention.

    q, k, v: [(B*T) x d] with T = block_len. Per block and head:
    softmax(q_h k_h^T / sqrt(d_h), over the key axis) @ v_h, with the usual
    max subtraction inside the softmax; head outputs are re-concatenated.
    Chunking over heads never changes results (blocks are independent).
    """
    if not (q.data.shape == k.data.shape == v.data.shape) or q.data.ndim != 2:
        raise _shape_err("attention", q.data.shape, k.data.shape, v.data.shape)
    rows, d = q.data.shape
    b, dh = _block_dims("attention", rows, d, num_heads, block_len)
    bh, t = b * num_heads, block_len
    c = 1.0 / np.sqrt(dh)
    q3 = _split_heads(q.data, b, t, num_heads, dh) * c
    k3 = _split_heads(k.data, b, t, num_heads, dh)
    v3 = _split_heads(v.data, b, t, num_heads, dh)
    out3 = np.empty_like(v3)
    for lo in range(0, bh, _ATTN_CHUNK):
        hi = min(lo + _ATTN_CHUNK, bh)
        out3[lo:hi] = _chunk_softmax(q3[lo:hi], k3[lo:hi]) @ v3[lo:hi]
    out = _merge_heads(out3, b, t, num_heads, dh)

    def bw(g: np.ndarray):
        g3 = _split_heads(g, b, t, num_heads, dh)
        dq3 = np.empty_like(q3)
        dk3 = np.empty_like(k3)
        dv3 = np.empty_like(v3)
        for lo in range(0, bh, _ATTN_CHUNK):
            hi = min(lo + _ATTN_CHUNK, bh)
            w = _chunk_softmax(q3[lo:hi], k3[lo:hi])  # bitwise equal to forward
            gc = g3[lo:hi]
            dv3[lo:hi] = w.transpose(0, 2, 1) @ gc
            ds = gc @ v3[lo:hi].transpose(0, 2, 1)
            ds -= np.sum(ds * w, axis=2, keepdims=True)
            ds *= w
            dq3[lo:hi] = ds @ k3[lo:hi]
            dk3[lo:hi] = ds.transpose(0, 2, 1) @ q3[lo:hi]  # q3 carries 1/sqrt(d_h)
        dq3 *= c
        return (_merge_heads(dq3, b, t, num_heads, dh),
                _merge_heads(dk3, b, t, num_heads, dh),
                _merge_heads(dv3, b, t, num_heads, dh))

    return _record("attention", out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers and step counter for a fixed parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on `params` and `state`."""
    if lr <= 0:
        raise ValueError("adam_step lr must be > 0")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise _shape_err("adam_step", (len(params),), (len(grads),), (len(state.m),))
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != g.shape or p.data.shape != m.shape:
            raise _shape_err("adam_step", p.data.shape, g.shape, m.shape)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
