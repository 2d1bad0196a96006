"""Deterministic f64 tensor graph with hand-written forward/backward kernels.

Every operation eagerly computes its value and records a node in a DAG;
``Tensor.backward`` walks the graph exactly once in reverse topological
order, accumulating gradients additively across fan-out. All reductions run
in a fixed order (row-major, innermost last), so repeated runs with the
same inputs are bit-identical. Everything is float64: the package's
verification story rests on central finite differences, which need the
headroom.

Spatial kernels accept either a single sample ([C, H, W]) or a batch
([B, C, H, W]); the batched form exists purely to amortize interpreter
overhead and is element-for-element identical to running samples one by
one.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DimensionError

Array = np.ndarray


def _f64(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


class Tensor:
    """A dense row-major f64 array plus its position in the op graph.

    Leaves are created with :func:`parameter` (trainable, receives
    gradients) or :func:`constant` (data, no gradient). Interior nodes are
    built by the kernel functions below and carry a closure that routes the
    incoming gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward: Callable[[Array], None] | None = None,
        name: str | None = None,
    ):
        self.data = _f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Visits each reachable gradient-requiring node exactly once, in
        reverse topological order; fan-out accumulates additively.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar root, got shape {self.data.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, op="param", name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, op="const", name=name)


def topo_order(root: Tensor) -> list[Tensor]:
    """Gradient-requiring nodes reachable from ``root``, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def accumulate_grad(t: Tensor, g: Array) -> None:
    """Add ``g`` into ``t.grad``; no-op for non-differentiable leaves."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_node(data: Array, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, op=op, parents=parents,
                  backward=backward if requires else None)


def _as4d(x: Array, op: str) -> tuple[Array, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{op}: expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data + b.data

    def backward(gout: Array) -> None:
        accumulate_grad(a, gout)
        accumulate_grad(b, gout)

    return make_node(out_data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data * b.data

    def backward(gout: Array) -> None:
        accumulate_grad(a, gout * b.data)
        accumulate_grad(b, gout * a.data)

    return make_node(out_data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def backward(gout: Array) -> None:
        accumulate_grad(a, gout * c)

    return make_node(out_data, "scale", (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(gout: Array) -> None:
        accumulate_grad(a, gout.reshape(a.data.shape))

    return make_node(out_data, "reshape", (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(gout: Array) -> None:
        accumulate_grad(a, np.transpose(gout, inverse))

    return make_node(out_data, "permute", (a,), backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar node."""
    out_data = np.asarray(a.data.sum())

    def backward(gout: Array) -> None:
        accumulate_grad(a, np.full_like(a.data, float(gout)))

    return make_node(out_data, "sum", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(gout: Array) -> None:
        accumulate_grad(a, gout * (1.0 - out_data * out_data))

    return make_node(out_data, "tanh", (a,), backward)


def sigmoid_array(x: Array) -> Array:
    """Numerically stable logistic function on a raw array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = sigmoid_array(a.data)

    def backward(gout: Array) -> None:
        accumulate_grad(a, gout * out_data * (1.0 - out_data))

    return make_node(out_data, "sigmoid", (a,), backward)


# ---------------------------------------------------------------------------
# spatial kernels


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with bias.

    Each output value starts from the bias and accumulates taps in
    row-major (cin, kh, kw) order — one vectorized add per tap — so the
    result is bit-identical to a naive sequential quadruple loop and stable
    across runs.
    """
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be positive, got {stride}")
    if pad < 0:
        raise ConfigError(f"conv2d: pad must be non-negative, got {pad}")
    xd, squeezed = _as4d(x.data, "conv2d")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d: weights must be [Cout,Cin,kh,kw], got shape {w.data.shape}")
    batch, cin, height, width = xd.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin_w != cin:
        raise DimensionError(f"conv2d: input channel axis has size {cin}, weights expect {cin_w}")
    if b.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis must have size {cout}, got shape {b.data.shape}")
    if kh > height + 2 * pad or kw > width + 2 * pad:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input {height + 2 * pad}x{width + 2 * pad}")
    if (height + 2 * pad - kh) % stride != 0:
        raise DimensionError(f"conv2d: height axis {height} not compatible with kh={kh}, "
                             f"stride={stride}, pad={pad}")
    if (width + 2 * pad - kw) % stride != 0:
        raise DimensionError(f"conv2d: width axis {width} not compatible with kw={kw}, "
                             f"stride={stride}, pad={pad}")
    h_out = (height + 2 * pad - kh) // stride + 1
    w_out = (width + 2 * pad - kw) // stride + 1

    if pad:
        xp = np.zeros((batch, cin, height + 2 * pad, width + 2 * pad))
        xp[:, :, pad:pad + height, pad:pad + width] = xd
    else:
        xp = xd
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(xp, (batch, cin, h_out, w_out, kh, kw),
                         (s0, s1, s2 * stride, s3 * stride, s2, s3))

    wd = w.data
    out = np.empty((batch, cout, h_out, w_out))
    out[:] = b.data[None, :, None, None]
    tmp = np.empty_like(out)
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                np.multiply(wd[None, :, ci, i, j, None, None],
                            windows[:, ci, None, :, :, i, j], out=tmp)
                out += tmp
    out_data = out[0] if squeezed else out

    def backward(gout: Array) -> None:
        # matmul contractions here: backward only needs finite-difference
        # accuracy, not the forward's oracle-exact summation order
        g = gout[None] if squeezed else gout
        if b.requires_grad:
            accumulate_grad(b, g.sum(axis=(0, 2, 3)))
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(g_mat.shape[0], -1)
            accumulate_grad(w, (g_mat.T @ cols).reshape(wd.shape))
        if x.requires_grad:
            dcols = (g_mat @ wd.reshape(cout, -1)).reshape(
                batch, h_out, w_out, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + height, pad:pad + width] if pad else gxp
            accumulate_grad(x, gx[0] if squeezed else gx)

    return make_node(out_data, "conv2d", (x, w, b), backward)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling; backward spreads gradients uniformly."""
    if factor < 1:
        raise ConfigError(f"avg_pool2d: factor must be positive, got {factor}")
    xd, squeezed = _as4d(x.data, "avg_pool2d")
    batch, ch, height, width = xd.shape
    if height % factor != 0:
        raise DimensionError(f"avg_pool2d: height axis {height} not divisible by factor {factor}")
    if width % factor != 0:
        raise DimensionError(f"avg_pool2d: width axis {width} not divisible by factor {factor}")
    h_out, w_out = height // factor, width // factor
    blocks = xd.reshape(batch, ch, h_out, factor, w_out, factor)
    out = blocks.mean(axis=(3, 5))
    out_data = out[0] if squeezed else out
    inv = 1.0 / (factor * factor)

    def backward(gout: Array) -> None:
        if not x.requires_grad:
            return
        g = gout[None] if squeezed else gout
        spread = np.broadcast_to((g * inv)[:, :, :, None, :, None],
                                 (batch, ch, h_out, factor, w_out, factor))
        gx = spread.reshape(batch, ch, height, width)
        accumulate_grad(x, gx[0] if squeezed else gx)

    return make_node(out_data, "avg_pool2d", (x,), backward)


def upsample_nn(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling; backward sums each block."""
    if factor < 1:
        raise ConfigError(f"upsample_nn: factor must be positive, got {factor}")
    xd, squeezed = _as4d(x.data, "upsample_nn")
    batch, ch, height, width = xd.shape
    out = np.broadcast_to(xd[:, :, :, None, :, None],
                          (batch, ch, height, factor, width, factor))
    out = np.ascontiguousarray(out).reshape(batch, ch, height * factor, width * factor)
    out_data = out[0] if squeezed else out

    def backward(gout: Array) -> None:
        if not x.requires_grad:
            return
        g = gout[None] if squeezed else gout
        gx = g.reshape(batch, ch, height, factor, width, factor).sum(axis=(3, 5))
        accumulate_grad(x, gx[0] if squeezed else gx)

    return make_node(out_data, "upsample_nn", (x,), backward)
