"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy buffer (float32 or float64). Every
primitive records a graph node (op id, input refs, backward closure) on its
output when some input requires grad; ``Tensor.backward`` walks the recorded
nodes in reverse topological order and accumulates gradients into the leaf
tensors' ``grad`` buffers. Interior adjoints live in a scratch dict, so
calling backward twice on the same graph accumulates exactly twice the
one-pass leaf gradients.

Convolution is lowered im2col-style onto the matmul path; pooling and the
reductions carry their own adjoints. Everything is plain numpy and
deterministic for fixed inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)

_checked = False
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when a NaN/Inf enters an op."""


class GraphError(RuntimeError):
    """Raised on backward misuse (non-scalar loss, consumed graph, ...)."""


def set_checked(on: bool) -> None:
    """Enable/disable NaN/Inf input screening on every primitive."""
    global _checked
    _checked = bool(on)


def checked() -> bool:
    return _checked


class no_grad:
    """Context manager that suppresses graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _Consumed:
    """Sentinel replacing freed nodes after a single-use backward."""


_CONSUMED = _Consumed()


class Node:
    """One recorded primitive application in the backward graph."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float32/float64 array participating in autodiff.

    Tensors are immutable after creation except for the ``grad`` buffer
    (and optimizer updates on parameter data between steps). ``grad`` is
    lazily allocated and accumulated, never overwritten, by backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append(f"op={self.node.op}" if isinstance(self.node, Node) else "consumed")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tail})"

    def detach(self) -> "Tensor":
        """Constant view of this tensor's data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Dtype-converted constant copy (not recorded in the graph)."""
        return Tensor(self.data.astype(dtype), requires_grad=False)

    # -- backward -----------------------------------------------------------

    def backward(self, free_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf.

        ``self`` must be a scalar. With ``free_graph`` the nodes are consumed
        and a second backward over them raises GraphError.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if isinstance(self.node, _Consumed):
            raise GraphError("backward graph already consumed (free_graph single-use mode)")
        if self.node is None and not self.requires_grad:
            raise GraphError("loss is not connected to any recorded graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if isinstance(t.node, _Consumed):
                raise GraphError("backward graph already consumed (free_graph single-use mode)")
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))

        adjoints: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            adj = adjoints.pop(id(t), None)
            if adj is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += adj
                continue
            input_grads = t.node.backward_fn(adj)
            for inp, g in zip(t.node.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                cur = adjoints.get(id(inp))
                # never mutate a stored adjoint in place: g may alias another
                adjoints[id(inp)] = g if cur is None else cur + g
        if free_graph:
            for t in order:
                if t.node is not None:
                    t.node = _CONSUMED

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(*_coerce_pair(self, other, "add"))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(*_coerce_pair(self, other, "mul"))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        a, b = _coerce_pair(self, other, "sub")
        return add(a, neg(b))

    def __rsub__(self, other):
        b, a = _coerce_pair(self, other, "sub")
        return add(a, neg(b))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def sum(self, axes=None, keepdims: bool = False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return mean(self, axes, keepdims)

    def max(self, axis: int, keepdims: bool = False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, tuple(shape))


# -- graph recording helpers ----------------------------------------------


def _make(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _check_inputs(op: str, *tensors: Tensor) -> None:
    if not _checked:
        return
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite value in input of shape {t.shape}")


def _same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _coerce_pair(a: Tensor, other, op: str) -> tuple:
    """Lift a scalar/array operand and broadcast both sides to one shape."""
    if not isinstance(other, Tensor):
        other = Tensor(np.asarray(other, dtype=a.data.dtype))
    _same_dtype(op, a, other)
    if a.shape != other.shape:
        target = np.broadcast_shapes(a.shape, other.shape)
        if a.shape != target:
            a = broadcast_to(a, target)
        if other.shape != target:
            other = broadcast_to(other, target)
    return a, other


# -- elementwise primitives -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_inputs("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _check_inputs("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    _check_inputs("neg", a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    _check_inputs("relu", a)
    ad = a.data
    return _make("relu", np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def exp(a: Tensor) -> Tensor:
    _check_inputs("exp", a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check_inputs("log", a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    _check_inputs("abs", a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def cast(a: Tensor, dtype) -> Tensor:
    """Differentiable dtype conversion (identity map, adjoint cast back)."""
    dtype = np.dtype(dtype)
    if dtype not in _ALLOWED_DTYPES:
        raise TypeError(f"cast: unsupported dtype {dtype}")
    if a.data.dtype == dtype:
        return a
    _check_inputs("cast", a)
    src = a.data.dtype
    return _make("cast", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """2-D matrix product with optional operand transposes (BLAS-style)."""
    _same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.shape} and {b.shape}")
    ad = a.data.T if transpose_a else a.data
    bd = b.data.T if transpose_b else b.data
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(
            f"matmul: inner dims {ad.shape[1]} != {bd.shape[0]} "
            f"(operands {a.shape}{'^T' if transpose_a else ''}, {b.shape}{'^T' if transpose_b else ''})"
        )
    _check_inputs("matmul", a, b)

    def backward_fn(g):
        ga = bd @ g.T if transpose_a else g @ bd.T
        gb = g.T @ ad if transpose_b else ad.T @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), backward_fn)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def _spread(g: np.ndarray, in_shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        shape = list(in_shape)
        for ax in axes:
            shape[ax] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def sum_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    _check_inputs("sum", a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape
    return _make("sum", out, (a,), lambda g: (_spread(g, in_shape, axes, keepdims),))


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    _check_inputs("mean", a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    in_shape = a.shape
    count = 1
    for ax in axes:
        count *= in_shape[ax]
    inv = 1.0 / count

    def backward_fn(g):
        return (_spread(g * np.asarray(inv, dtype=g.dtype), in_shape, axes, keepdims),)

    return _make("mean", out, (a,), backward_fn)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; ties route gradient to the first maximum."""
    _check_inputs("max", a)
    axis = axis % a.ndim
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    in_shape, dtype = a.shape, a.data.dtype

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros(in_shape, dtype=dtype)
        np.put_along_axis(gx, idx, g, axis)
        return (gx,)

    return _make("max", out, (a,), backward_fn)


# -- shape movement ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_inputs("reshape", a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    in_shape = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e
    _check_inputs("broadcast", a)
    in_shape = a.shape

    def backward_fn(g):
        extra = g.ndim - len(in_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        squeeze = tuple(i for i, n in enumerate(in_shape) if n == 1 and g.shape[i] != 1)
        if squeeze:
            g = g.sum(axis=squeeze, keepdims=True)
        return (g,)

    return _make("broadcast", out, (a,), backward_fn)


def pad(a: Tensor, pads: Sequence[tuple]) -> Tensor:
    """Zero-pad with (before, after) per axis."""
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    if len(pads) != a.ndim:
        raise ShapeError(f"pad: got {len(pads)} pad pairs for {a.ndim}-D input")
    _check_inputs("pad", a)
    out = np.pad(a.data, pads)
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, a.shape))
    return _make("pad", out, (a,), lambda g: (g[key],))


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing/indexing (ints and step-1 slices)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if isinstance(k, slice):
            if k.step not in (None, 1):
                raise ShapeError("slice: step slicing not supported")
        elif not isinstance(k, int):
            raise ShapeError(f"slice: unsupported index {k!r}")
    _check_inputs("slice", a)
    out = a.data[key]
    in_shape, dtype = a.shape, a.data.dtype

    def backward_fn(g):
        gx = np.zeros(in_shape, dtype=dtype)
        gx[key] = g
        return (gx,)

    return _make("slice", out, (a,), backward_fn)


# -- convolution and pooling --------------------------------------------------


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad_hw(arr: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    """Spatial zero/constant padding of an NCHW array (faster than np.pad)."""
    if ph == 0 and pw == 0:
        return arr
    n, c, h, w = arr.shape
    out = np.full((n, c, h + 2 * ph, w + 2 * pw), value, dtype=arr.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = arr
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided sliding-window view (N, C, kh, kw, OH, OW) over a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride)
    )


# im2col buffers up to this size are kept for the backward pass; larger ones
# are recomputed from the (padded) input to bound training memory
CONV_COLS_CACHE_BYTES = 64 * 1024 * 1024


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW 2-D cross-correlation, lowered im2col-style onto one GEMM.

    ``weight`` is (out_ch, in_ch, kh, kw); no bias (add one explicitly).
    The backward pass reuses the same lowering: dW and dX are two GEMMs plus
    the col2im scatter (the adjoint of the window gather).
    """
    _same_dtype("conv2d", x, weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ic}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding}")
    _check_inputs("conv2d", x, weight)

    xp = _pad_hw(x.data, padding, padding)

    def im2col(src, ck, kkh, kkw, st, out_h, out_w):
        win = _windows(src, kkh, kkw, st, out_h, out_w)
        return np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(
            ck * kkh * kkw, src.shape[0] * out_h * out_w)

    cols = im2col(xp, c, kh, kw, stride, oh, ow)
    w2 = weight.data.reshape(oc, c * kh * kw)
    out = np.ascontiguousarray((w2 @ cols).reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))

    keep_cols = cols if cols.nbytes <= CONV_COLS_CACHE_BYTES else None
    saved_xp = xp if keep_cols is None else None
    wd = weight.data

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)
        cols_b = keep_cols if keep_cols is not None else im2col(saved_xp, c, kh, kw, stride, oh, ow)
        gw = (g2 @ cols_b.T).reshape(oc, c, kh, kw)
        gx = _conv2d_input_grad(g, wd, stride, padding, h, w, im2col)
        return gx, gw

    return _make("conv2d", out, (x, weight), backward_fn)


def _conv2d_input_grad(g, wd, stride, padding, h, w, im2col):
    """dX of conv2d as a full correlation of the (dilated) output adjoint with
    the spatially flipped, channel-swapped kernels: one more im2col GEMM."""
    n, oc, oh, ow = g.shape
    _, c, kh, kw = wd.shape
    lo_h, lo_w = kh - 1 - padding, kw - 1 - padding
    if stride > 1 or lo_h < 0 or lo_w < 0:
        # dilating the adjoint makes the GEMM route much slower; scatter instead
        return _conv2d_input_grad_scatter(g, wd, stride, padding, h, w)
    gd = g
    hi_h = lo_h + (h + 2 * padding - kh) % stride
    hi_w = lo_w + (w + 2 * padding - kw) % stride
    if max(lo_h, hi_h, lo_w, hi_w):
        gp = np.zeros((n, oc, oh + lo_h + hi_h, ow + lo_w + hi_w), dtype=gd.dtype)
        gp[:, :, lo_h:lo_h + oh, lo_w:lo_w + ow] = gd
    else:
        gp = gd
    wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, oc * kh * kw)
    cols_g = im2col(gp, oc, kh, kw, 1, h, w)
    return np.ascontiguousarray((wf @ cols_g).reshape(c, n, h, w).transpose(1, 0, 2, 3))


def _conv2d_input_grad_scatter(g, wd, stride, padding, h, w):
    n, oc, oh, ow = g.shape
    _, c, kh, kw = wd.shape
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)
    gcols = (wd.reshape(oc, c * kh * kw).T @ g2).reshape(c, kh, kw, n, oh, ow)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                gcols[:, ki, kj].transpose(1, 0, 2, 3)
    return gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """NCHW max pooling; padded cells are -inf and ties pick the first cell."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: need 4-D input, got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kernel, stride, padding)
    ow = _conv_out_size(w, kernel, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"max_pool2d: empty output for input {x.shape}, kernel {kernel}")
    _check_inputs("max_pool2d", x)

    xp = _pad_hw(x.data, padding, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride, oh, ow)
    flat = win.reshape(n, c, kernel * kernel, oh, ow)  # copies the window view
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward_fn(g):
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for ki in range(kernel):
            for kj in range(kernel):
                sel = (idx == ki * kernel + kj)
                gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += g * sel
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx,)

    return _make("max_pool2d", out, (x,), backward_fn)


def batch_norm2d_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple:
    """Fused train-mode batch normalization over (N, H, W) per channel.

    Returns (normalized tensor, batch mean, batch population variance); the
    stats come back as plain (C,) arrays for running-buffer updates. One
    primitive with the standard closed-form backward instead of a dozen
    elementwise nodes.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d_train: need N×C×H×W input, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d_train: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"do not match {x.shape[1]} channels")
    _same_dtype("batch_norm2d_train", x, gamma)
    _same_dtype("batch_norm2d_train", x, beta)
    _check_inputs("batch_norm2d_train", x, gamma, beta)
    xd = x.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=axes, keepdims=True)
    var = np.square(xd - mu).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gr = gamma.data.reshape(1, -1, 1, 1)
    y = gr * xhat + beta.data.reshape(1, -1, 1, 1)

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gr
        s1 = dxhat.mean(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = inv * (dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    out = _make("batch_norm2d_train", y, (x, gamma, beta), backward_fn)
    return out, mu.reshape(-1).copy(), var.reshape(-1).copy()


# -- utilities ----------------------------------------------------------------


def zero_grad(params: Iterable[Tensor]) -> None:
    """Zero-fill the grad buffers of the listed tensors (idempotent)."""
    for p in params:
        if p.grad is not None:
            p.grad.fill(0.0)


def finite_difference_grad(f: Callable[[Tensor], Union[Tensor, float]],
                           x: Tensor, step: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, element by element.

    Independent oracle for backward(): evaluates f at x +/- step*e_i and
    never touches the autodiff graph. x.data is perturbed in place and
    restored.
    """
    if step <= 0:
        raise ValueError(f"finite_difference_grad: step must be positive, got {step}")
    flat = x.data.reshape(-1)
    g = np.zeros(x.data.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _scalar_value(f(x))
        flat[i] = orig - step
        lo = _scalar_value(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"finite_difference_grad: f returned non-finite value at element {i}")
        g[i] = (hi - lo) / (2.0 * step)
    return Tensor(g.reshape(x.shape), dtype=x.data.dtype)


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        if v.data.size != 1:
            raise GraphError(f"finite_difference_grad: f must return a scalar, got shape {v.shape}")
        return float(v.data)
    return float(v)
