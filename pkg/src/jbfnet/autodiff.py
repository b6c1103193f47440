"""Minimal reverse-mode automatic differentiation over dense real tensors.

Covers exactly the operator set the filtering network needs: 3D/2D
cross-correlation, elementwise arithmetic and activations, geometry ops
(pad/crop/shift/stack/transpose/reshape), reductions, and scalar indexing.

The recorded graph lives on the tensors themselves: each non-leaf holds its
parents plus a closure implementing its backward rule; ``backward`` walks the
graph once in reverse topological order. A graph and its tensors are confined
to a single thread; independent graphs may run concurrently.

Convention notes (pinned by tests):
- conv ops are cross-correlation (no kernel flip), stated once here.
- reductions use numpy's fixed summation order, so identical inputs give
  bit-identical outputs within one build.
- leaky_relu uses slope for x < 0 and 1 for x >= 0 (the kink resolves to 1).
"""

import numpy as np

from . import _conv


class ShapeError(ValueError):
    """Raised when an operand shape violates an operator contract."""


class GradError(RuntimeError):
    """Raised on invalid backward invocations (non-scalar loss, etc.)."""


_ALLOWED_DTYPES = (np.float32, np.float64)


def _check_dtype(arr):
    if arr.dtype.type not in _ALLOWED_DTYPES:
        raise TypeError(f"tensor dtype must be float32/float64, got {arr.dtype}")


class Tensor:
    """Dense n-d array of reals participating in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, _parents=(), _bw=None):
        data = np.asarray(data)
        if data.dtype.type not in _ALLOWED_DTYPES:
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bw = _bw

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad=False, dtype=None):
    """Build a leaf tensor; dtype defaults to float32 for non-float input."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.type not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, bw):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _bw=bw)


def _binary_operands(a, b):
    """Allow tensor-tensor (same shape or scalar) and tensor-python-number."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"operands not same-shape or scalar: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape) if np.prod(shape) == 1 else g


def add(a, b):
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _binary_operands(a, b)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def neg(a):
    out = -a.data

    def bw(g):
        _accum(a, -g)

    return _make(out, (a,), bw)


def scale(a, s):
    """Multiply by a plain python/numpy scalar constant (no gradient to s)."""
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.dtype)

    def bw(g):
        _accum(a, g * np.asarray(s, dtype=a.dtype))

    return _make(out, (a,), bw)


def div_guarded(x, y, eps=1e-6):
    """x / (y + eps); never divides by a value below eps for y >= 0."""
    if eps <= 0:
        raise ValueError("div_guarded: eps must be > 0")
    x, y = _binary_operands(x, y)
    den = y.data + np.asarray(eps, dtype=y.dtype)
    out = x.data / den

    def bw(g):
        if x.requires_grad:
            _accum(x, _reduce_to(g / den, x.shape))
        if y.requires_grad:
            _accum(y, _reduce_to(-g * x.data / (den * den), y.shape))

    return _make(out, (x, y), bw)


def relu(a):
    out = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), bw)


def leaky_relu(a, slope=0.01):
    out = np.where(a.data >= 0, a.data, a.data * np.asarray(slope, dtype=a.dtype))

    def bw(g):
        s = np.where(a.data >= 0, np.asarray(1, dtype=a.dtype), np.asarray(slope, dtype=a.dtype))
        _accum(a, g * s)

    return _make(out, (a,), bw)


def sigmoid(a):
    # numerically stable two-sided form
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def square(a):
    out = a.data * a.data

    def bw(g):
        _accum(a, g * (2.0 * a.data))

    return _make(out, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw)


def tsum(a):
    """Sum of all elements -> scalar tensor (fixed summation order)."""
    out = a.data.sum(dtype=a.dtype).reshape(())

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(out, (a,), bw)


def tmean(a):
    n = a.data.size
    out = (a.data.sum(dtype=a.dtype) / a.dtype.type(n)).reshape(())

    def bw(g):
        _accum(a, np.broadcast_to(g / a.dtype.type(n), a.shape).astype(a.dtype, copy=True))

    return _make(out, (a,), bw)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a, axes):
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(out, (a,), bw)


def pad_zero(a, pads):
    """pads: per-axis (before, after) tuples. Padding contributes no gradient."""
    pads = tuple((int(p0), int(p1)) for p0, p1 in pads)
    if len(pads) != a.data.ndim:
        raise ShapeError(f"pad_zero: got {len(pads)} pad pairs for rank-{a.data.ndim} tensor")
    out = np.pad(a.data, pads)
    sl = tuple(slice(p0, p0 + s) for (p0, _), s in zip(pads, a.shape))

    def bw(g):
        _accum(a, g[sl])

    return _make(out, (a,), bw)


def crop(a, bounds):
    """bounds: per-axis (start, stop); gradients scatter back to the source."""
    bounds = tuple((int(b0), int(b1)) for b0, b1 in bounds)
    if len(bounds) != a.data.ndim:
        raise ShapeError(f"crop: got {len(bounds)} bounds for rank-{a.data.ndim} tensor")
    for ax, ((b0, b1), s) in enumerate(zip(bounds, a.shape)):
        if not (0 <= b0 <= b1 <= s):
            raise ShapeError(f"crop: bounds {b0}:{b1} out of range on axis {ax} (extent {s})")
    sl = tuple(slice(b0, b1) for b0, b1 in bounds)
    out = np.ascontiguousarray(a.data[sl])

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[sl] += g

    return _make(out, (a,), bw)


def shift(a, offsets):
    """Translate by integer offsets per axis, zero-filling exposed cells."""
    offsets = tuple(int(o) for o in offsets)
    if len(offsets) != a.data.ndim:
        raise ShapeError(f"shift: got {len(offsets)} offsets for rank-{a.data.ndim} tensor")
    src, dst = [], []
    for off, s in zip(offsets, a.shape):
        if abs(off) >= s:
            raise ShapeError(f"shift: offset {off} exceeds extent {s}")
        if off >= 0:
            dst.append(slice(off, s))
            src.append(slice(0, s - off))
        else:
            dst.append(slice(0, s + off))
            src.append(slice(-off, s))
    src, dst = tuple(src), tuple(dst)
    out = np.zeros_like(a.data)
    out[dst] = a.data[src]

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[src] += g[dst]

    return _make(out, (a,), bw)


def stack_slices(tensors, axis):
    """Stack same-shape tensors along a new axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack_slices: empty input")
    shape0 = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.shape != shape0:
            raise ShapeError(f"stack_slices: tensor {i} has shape {t.shape}, expected {shape0}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        gs = np.moveaxis(g, axis, 0)
        for t, gt in zip(tensors, gs):
            if t.requires_grad:
                _accum(t, np.ascontiguousarray(gt))

    return _make(out, tuple(tensors), bw)


def index_scalar(a, idx):
    """Pick one element as a 0-d tensor; gradient scatters back."""
    idx = tuple(int(i) for i in idx)
    out = np.asarray(a.data[idx]).reshape(())

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g.reshape(())

    return _make(out, (a,), bw)


def _normalize_pad(pad, rank):
    if isinstance(pad, int):
        return (pad,) * rank
    pad = tuple(int(p) for p in pad)
    if len(pad) != rank:
        raise ShapeError(f"pad must have {rank} entries, got {len(pad)}")
    if any(p < 0 for p in pad):
        raise ShapeError(f"pad entries must be nonnegative, got {pad}")
    return pad


def conv3d(x, kernel, bias=None, pad=0):
    """Cross-correlate x (c_in, d, h, w) with kernel (c_out, c_in, kd, kh, kw).

    Symmetric zero padding per spatial axis; output extents
    d + 2*pad_d - kd + 1 (same for h, w).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d: input must be rank 4 (c,d,h,w), got shape {x.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be rank 5, got shape {kernel.shape}")
    pad = _normalize_pad(pad, 3)
    co, ci, kd, kh, kw = kernel.shape
    if ci != x.shape[0]:
        raise ShapeError(
            f"conv3d: channel axis mismatch: input has {x.shape[0]} channels, kernel expects {ci}"
        )
    for ax, (ke, xe, p) in enumerate(zip((kd, kh, kw), x.shape[1:], pad)):
        if ke > xe + 2 * p:
            raise ShapeError(
                f"conv3d: kernel extent {ke} exceeds padded input extent {xe + 2 * p} on axis {ax + 1}"
            )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({co},)")
    if x.dtype != kernel.dtype or (bias is not None and bias.dtype != x.dtype):
        raise TypeError("conv3d: mixed dtypes")

    bdata = bias.data if bias is not None else None
    out, buf, grid = _conv.conv3d_forward(x.data, kernel.data, bdata, pad)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g = np.ascontiguousarray(g)
        if kernel.requires_grad or (bias is not None and bias.requires_grad):
            dw, db = _conv.conv3d_bwd_weights(buf, grid, g, kernel.shape)
            if kernel.requires_grad:
                _accum(kernel, dw)
            if bias is not None and bias.requires_grad:
                _accum(bias, db)
        if x.requires_grad:
            _accum(x, _conv.conv3d_bwd_data(kernel.data, g, x.shape, pad))

    return _make(out, parents, bw)


def conv2d(x, kernel, bias=None, pad=0):
    """conv3d restricted to 2D: x (c_in, h, w), kernel (c_out, c_in, kh, kw)."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be rank 3 (c,h,w), got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got shape {kernel.shape}")
    pad = _normalize_pad(pad, 2)
    x4 = reshape(x, (x.shape[0], 1) + tuple(x.shape[1:]))
    k5 = reshape(kernel, (kernel.shape[0], kernel.shape[1], 1) + tuple(kernel.shape[2:]))
    out = conv3d(x4, k5, bias, (0,) + pad)
    return reshape(out, (out.shape[0],) + tuple(out.shape[2:]))


def backward(loss):
    """Populate grads of every requires_grad tensor reachable from loss.

    Visits each recorded node exactly once, in reverse topological order.
    """
    if not isinstance(loss, Tensor):
        raise GradError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise GradError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("backward: loss does not require grad (no parameters in graph)")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bw is not None:
            node._bw(node.grad)


def grad_check(fn, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients of scalar fn(params) to central differences.

    params: dict name -> float64 ndarray. fn receives a dict of leaf Tensors
    and must return a scalar Tensor built from them. Every parameter element
    is perturbed individually; suited to small operator-level checks (the
    model-scale harness lives in jbfnet.gradcheck).

    Returns a report dict with per-parameter max relative error and the
    worst offenders; report["passed"] is True iff all below tol.
    """
    leaves = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    loss = fn(leaves)
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def eval_loss(arrs):
        lv = {k: Tensor(v) for k, v in arrs.items()}
        return float(fn(lv).data)

    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    report = {"per_param": {}, "worst": [], "passed": True, "tol": tol, "step": step}
    gscale = max((np.abs(g).max() for g in analytic.values()), default=0.0)
    floor = max(1e-7 * max(1.0, gscale), 1e-12)
    for name, arr in base.items():
        errs = np.zeros(arr.size)
        flat = arr.reshape(-1)
        for j in range(arr.size):
            keep = flat[j]
            flat[j] = keep + step
            lp = eval_loss(base)
            flat[j] = keep - step
            lm = eval_loss(base)
            flat[j] = keep
            num = (lp - lm) / (2.0 * step)
            ana = analytic[name].reshape(-1)[j]
            denom = max(abs(num), abs(ana))
            errs[j] = 0.0 if denom < floor else abs(num - ana) / denom
        worst_j = int(np.argmax(errs)) if arr.size else 0
        report["per_param"][name] = {"max_rel_err": float(errs.max(initial=0.0)), "worst_index": worst_j}
        if arr.size and errs.max() >= tol:
            report["passed"] = False
            report["worst"].append((name, worst_j, float(errs.max())))
    report["worst"].sort(key=lambda t: -t[2])
    return report
