"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Ops execute eagerly on numpy arrays. While a Tape is active, every primitive
appends a backward closure to it; ``backward(loss)`` replays the tape in
reverse and accumulates gradients into every participating tensor that has
``requires_grad`` set.

Storage is float32 by default (float64 supported end to end, and used by
``gradcheck``); reductions accumulate in float64 regardless of storage width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not conform to the primitive's rule."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf showed up in a tensor value."""


class TapeError(RuntimeError):
    """Backward pass requested without a usable tape."""


_STORAGE_DTYPES = (np.float32, np.float64)

# stack of active tapes; ops record onto the innermost one
_ACTIVE_TAPES: list["Tape"] = []


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


class DiffTensor:
    """Dense n-d array participating in reverse-mode differentiation.

    ``grad`` is populated (same shape as ``data``) by a backward pass when
    ``requires_grad`` is true; it stays ``None`` otherwise.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _STORAGE_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, tape: Optional["Tape"]) -> "DiffTensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.tape = tape
        return out

    def detach(self) -> "DiffTensor":
        """Leaf view of the same values, cut off from any tape."""
        return DiffTensor._wrap(self.data, requires_grad=False, tape=None)

    def astype(self, dtype) -> "DiffTensor":
        return DiffTensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def copy(self) -> "DiffTensor":
        return DiffTensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item(): tensor has shape {self.shape}, not scalar")
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar (all routed through the primitives below) -------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple
    output: DiffTensor
    backward: Callable  # grad_out -> tuple of grads aligned with inputs (None for no-grad inputs)
    op: str


class Tape:
    """Ordered record of executed primitives; reset between optimization steps.

    Replaying the records in reverse order propagates gradients from a scalar
    output back to the leaves.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()


def _record(op: str, inputs: Sequence[DiffTensor], out_data: np.ndarray, backward: Callable) -> DiffTensor:
    """Wrap a primitive's result, recording it on the active tape if gradients flow."""
    _check_finite(out_data, op)
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = DiffTensor._wrap(out_data, requires_grad=needs, tape=tape if needs else None)
    if needs:
        tape._nodes.append(_Node(tuple(inputs), out, backward, op))
    return out


def backward(loss: DiffTensor) -> None:
    """Populate ``grad`` on every requires-grad tensor the loss's tape touched."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or not tape._nodes:
        raise TapeError("backward: loss was not produced through a non-empty tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        g_out = node.output.grad
        if g_out is None:
            continue  # dead branch
        grads = node.backward(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not isinstance(t, DiffTensor) or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g.astype(t.data.dtype, copy=False)

    # tensors seen by the tape but not on the loss's path still get a defined
    # (zero) gradient, so "constant w.r.t. x" reads as grad zero
    for node in tape._nodes:
        for t in (*node.inputs, node.output):
            if isinstance(t, DiffTensor) and t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_pair(a, b, op: str):
    """Coerce the scalar side of a mixed op; enforce matching dtypes otherwise."""
    if isinstance(a, DiffTensor) and isinstance(b, DiffTensor):
        if a.data.dtype != b.data.dtype:
            raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
        return a, b
    if isinstance(a, DiffTensor):
        return a, DiffTensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, DiffTensor):
        return DiffTensor(np.asarray(a, dtype=b.data.dtype)), b
    raise TypeError(f"{op}: expected at least one DiffTensor operand")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: DiffTensor, b: DiffTensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> DiffTensor:
    a, b = _as_pair(a, b, "add")
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> DiffTensor:
    a, b = _as_pair(a, b, "sub")
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> DiffTensor:
    """Elementwise (or scalar) multiply."""
    a, b = _as_pair(a, b, "mul")
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", (a, b), out, bwd)


def div(a, b) -> DiffTensor:
    a, b = _as_pair(a, b, "div")
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _record("div", (a, b), out, bwd)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _as_pair(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), out, bwd)


def transpose(a: DiffTensor, axes: Optional[tuple] = None) -> DiffTensor:
    src_axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(src_axes))
    out = np.transpose(a.data, src_axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (a,), out, bwd)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    old = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", (a,), out, bwd)


def gather(a: DiffTensor, indices) -> DiffTensor:
    """Select rows of ``a`` (axis 0) by integer index; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-d, got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather: indices must be integers")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of size {n}")
    out = a.data[idx]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _record("gather", (a,), out, bwd)


def sqrt(a: DiffTensor) -> DiffTensor:
    if (a.data < 0).any():
        raise NonFiniteError("sqrt: negative operand")
    out = np.sqrt(a.data)
    root = out

    def bwd(g):
        return (g * 0.5 / np.maximum(root, 1e-12),)

    return _record("sqrt", (a,), out, bwd)


def relu(a: DiffTensor) -> DiffTensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (a,), out, bwd)


def maximum_const(a: DiffTensor, c: float) -> DiffTensor:
    """max(a, c) elementwise against a constant; subgradient 0 at equality."""
    out = np.maximum(a.data, c)
    mask = a.data > c

    def bwd(g):
        return (g * mask,)

    return _record("maximum_const", (a,), out, bwd)


def tensor_sum(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    in_shape = a.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, in_shape).astype(a.data.dtype, copy=False),)

    return _record("sum", (a,), out, bwd)


def sq_l2_norm(a: DiffTensor) -> DiffTensor:
    """Scalar sum of squares over all entries."""
    d = a.data.astype(np.float64, copy=False)
    out = np.asarray(np.sum(d * d), dtype=a.data.dtype)
    ad = a.data

    def bwd(g):
        return (2.0 * ad * g,)

    return _record("sq_l2_norm", (a,), out, bwd)


def rowwise_sq_norm(a: DiffTensor) -> DiffTensor:
    """Per-row sum of squares of a 2-d tensor -> length-m vector."""
    if a.ndim != 2:
        raise ShapeError(f"rowwise_sq_norm: expected 2-d tensor, got {a.shape}")
    d = a.data.astype(np.float64, copy=False)
    out = np.sum(d * d, axis=1).astype(a.data.dtype)
    ad = a.data

    def bwd(g):
        return (2.0 * ad * g[:, None],)

    return _record("rowwise_sq_norm", (a,), out, bwd)


def global_avg_pool(a: DiffTensor) -> DiffTensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {a.shape}")
    n, c, h, w = a.shape
    out = np.mean(a.data, axis=(2, 3), dtype=np.float64).astype(a.data.dtype)
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], a.shape).astype(a.data.dtype, copy=False),)

    return _record("global_avg_pool", (a,), out, bwd)


def channel_affine(x: DiffTensor, scale: DiffTensor, shift: DiffTensor) -> DiffTensor:
    """Per-channel learnable scale and shift over NCHW maps (batch-norm stand-in)."""
    if x.ndim != 4:
        raise ShapeError(f"channel_affine: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"channel_affine: scale/shift must have shape ({c},), got {scale.shape} and {shift.shape}"
        )
    out = x.data * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    xd, sd = x.data, scale.data

    def bwd(g):
        gx = g * sd[None, :, None, None]
        gscale = np.sum(g * xd, axis=(0, 2, 3), dtype=np.float64).astype(sd.dtype)
        gshift = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(sd.dtype)
        return gx, gscale, gshift

    return _record("channel_affine", (x, scale, shift), out, bwd)


def batch_norm(x: DiffTensor, scale: DiffTensor, shift: DiffTensor,
               running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None,
               eps: float = 1e-5) -> DiffTensor:
    """Per-channel normalization of NCHW maps followed by scale and shift.

    With ``running_mean``/``running_var`` given, those fixed statistics are
    used (inference mode); otherwise statistics come from the batch itself and
    the backward pass differentiates through them.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"batch_norm: scale/shift must have shape ({c},), got {scale.shape} and {shift.shape}")
    xd = x.data
    use_batch_stats = running_mean is None
    if use_batch_stats:
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
    else:
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
        if mean.shape != (c,) or var.shape != (c,):
            raise ShapeError(f"batch_norm: running stats must have shape ({c},)")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mean[None, :, None, None]) * inv_std[None, :, None, None]).astype(xd.dtype)
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    sd = scale.data

    def bwd(g):
        gshift = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(sd.dtype)
        gscale = np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64).astype(sd.dtype)
        coeff = (sd.astype(np.float64) * inv_std)[None, :, None, None]
        if use_batch_stats:
            g_mean = np.mean(g, axis=(0, 2, 3), dtype=np.float64)[None, :, None, None]
            gx_mean = np.mean(g * xhat, axis=(0, 2, 3), dtype=np.float64)[None, :, None, None]
            gx = coeff * (g - g_mean - xhat * gx_mean)
        else:
            gx = coeff * g
        return gx.astype(xd.dtype), gscale, gshift

    return _record("batch_norm", (x, scale, shift), out, bwd)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: DiffTensor, weight: DiffTensor, bias: Optional[DiffTensor] = None,
           stride: int = 1, padding: int = 0) -> DiffTensor:
    """2-d cross-correlation: x (N,C,H,W) * weight (O,C,kh,kw) -> (N,O,H',W')."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OCkhkw weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} do not match weight channels {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * padding},{w + 2 * padding})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias must have shape ({o},), got {bias.shape}")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = gmat @ wmat  # (n*ho*wo, c*kh*kw)
        g6 = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        hp, wp = h + 2 * padding, w + 2 * padding
        gxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[:, :, :, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None:
            gb = np.sum(gmat, axis=0, dtype=np.float64).astype(bias.data.dtype)
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, bwd)


def _pool_crop(x: np.ndarray, k: int):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool: window {k} larger than input ({h},{w})")
    return x[:, :, :ho * k, :wo * k], ho, wo


def avg_pool2d(x: DiffTensor, k: int = 2) -> DiffTensor:
    """Non-overlapping k x k average pool (trailing rows/cols dropped)."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW input, got {x.shape}")
    xc, ho, wo = _pool_crop(x.data, k)
    n, c = x.shape[:2]
    out = xc.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5), dtype=np.float64).astype(x.data.dtype)
    inv = 1.0 / (k * k)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * k, :wo * k] = np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3)
        return (gx,)

    return _record("avg_pool2d", (x,), out, bwd)


def max_pool2d(x: DiffTensor, k: int = 2) -> DiffTensor:
    """Non-overlapping k x k max pool; ties route gradient to the first max."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    xc, ho, wo = _pool_crop(x.data, k)
    n, c = x.shape[:2]
    blocks = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * k, :wo * k] = gblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, ho * k, wo * k)
        return (gx,)

    return _record("max_pool2d", (x,), out, bwd)


def softmax_cross_entropy(logits: DiffTensor, labels) -> DiffTensor:
    """Summed cross-entropy of row-softmax against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    y = np.asarray(labels)
    m, k = logits.shape
    if y.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: labels must have shape ({m},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: label out of range for {k} classes")

    z = logits.data.astype(np.float64, copy=False)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    out = np.asarray(-logp[np.arange(m), y].sum(), dtype=logits.data.dtype)
    softmax = (ez / sez).astype(logits.data.dtype)

    def bwd(g):
        gl = softmax.copy()
        gl[np.arange(m), y] -= 1.0
        return (gl * g,)

    return _record("softmax_cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    """Per-coordinate analytic vs. numeric comparison for one scalar function."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    excluded: np.ndarray  # True where a kink sits within `step` of the point
    step: float
    tol: float

    @property
    def max_rel_err(self) -> float:
        included = self.rel_err[~self.excluded]
        return float(included.max()) if included.size else 0.0

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max_rel_err={self.max_rel_err:.3e} (tol={self.tol:.1e}, "
                f"step={self.step:.1e}, {self.n_excluded} kink coords excluded)")


def gradcheck(fn: Callable[[DiffTensor], DiffTensor], point: DiffTensor,
              step: float = 1e-4, tol: float = 1e-4) -> GradcheckReport:
    """Compare the tape gradient of ``fn`` at ``point`` against central differences.

    Coordinates whose one-sided slopes disagree (a kink within ``step``) are
    flagged and excluded from the pass/fail comparison. ``fn`` must be scalar
    valued; float64 points give the sharpest checks.
    """
    if step <= 0:
        raise ValueError("gradcheck: step must be positive")
    base = np.asarray(point.data, dtype=np.float64)
    _check_finite(base, "gradcheck point")

    with Tape():
        x = DiffTensor(base.copy(), requires_grad=True, dtype=np.float64)
        y = fn(x)
        if not isinstance(y, DiffTensor) or y.data.size != 1:
            raise ShapeError("gradcheck: fn must return a scalar DiffTensor")
        backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(base)).reshape(-1).astype(np.float64)

    def feval(arr: np.ndarray) -> float:
        return float(fn(DiffTensor(arr, dtype=np.float64)).data)

    f0 = feval(base)
    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    excluded = np.zeros(flat.size, dtype=bool)
    work = flat.copy()
    for i in range(flat.size):
        orig = work[i]
        work[i] = orig + step
        fp = feval(work.reshape(base.shape))
        work[i] = orig - step
        fm = feval(work.reshape(base.shape))
        work[i] = orig
        numeric[i] = (fp - fm) / (2.0 * step)
        # large second difference = slope jump inside [x-step, x+step]
        if abs(fp + fm - 2.0 * f0) > 100.0 * step * step * max(1.0, abs(f0)):
            excluded[i] = True

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel_err = np.abs(analytic - numeric) / denom
    return GradcheckReport(analytic=analytic, numeric=numeric, rel_err=rel_err,
                           excluded=excluded, step=step, tol=tol)
