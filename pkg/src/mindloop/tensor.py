"""Dense float64 tensors with reverse-mode autodiff on a define-by-run tape.

Operations execute eagerly on numpy arrays.  While a ``Tape`` is active
(entered as a context manager) every op whose inputs require gradients is
recorded; ``backward(loss)`` replays the recorded list in reverse order,
accumulating exactly one gradient contribution per use of each input.
Outside an active tape all ops are plain eager math and nothing is recorded,
which doubles as the no-grad mode used during sampling and evaluation.

Design constraints honoured throughout:

* everything is float64, row-major;
* no implicit broadcasting -- elementwise ops demand equal shapes, the only
  exceptions are python scalars and the explicit channel-bias op;
* any op that produces a non-finite value raises ``NumericError`` naming
  the op, so NaNs cannot propagate silently;
* a tape is confined to a single thread; parallelism, where wanted, is a
  data-parallel map over independent graphs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "softmax",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "slice_",
    "take",
    "concat",
    "tsum",
    "tmean",
    "exp",
    "leaky_relu",
    "gelu",
    "conv2d",
    "upsample2",
    "add_channel",
    "clamp01",
    "mse",
    "norm_l2",
]

# Stack of active tapes; innermost last.  Module-level, single-threaded use.
_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of executed ops (a Wengert list).

    Recording order is a topological order of the graph, so replaying the
    list in reverse during ``backward`` visits every node after all of its
    consumers.  ``clear()`` drops the record and resets the gradients of
    every tensor that touched this tape to zero (``None`` until the next
    backward allocates them).
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def _record(self, name, inputs, output, backward_fn):
        self._nodes.append((name, inputs, output, backward_fn))
        output._tape = self

    def backward(self, loss: "Tensor"):
        """Seed d(loss)/d(loss)=1 and accumulate gradients onto the tape's tensors."""
        if loss.shape != ():
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss is not connected to this tape")
        if not np.isfinite(loss.data):
            raise NumericError("backward called on a non-finite loss")
        loss.grad = np.ones((), dtype=np.float64)
        for name, inputs, output, backward_fn in reversed(self._nodes):
            g = output.grad
            if g is None:
                continue  # output never reached the loss
            grads = backward_fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericError(f"non-finite gradient produced by backward of '{name}'")
                if inp.grad is None:
                    inp.grad = gi.copy() if gi.base is not None or gi is g else gi
                else:
                    inp.grad = inp.grad + gi

    def clear(self):
        """Forget the recorded ops and zero every gradient seen by this tape."""
        for _, inputs, output, _ in self._nodes:
            output.grad = None
            output._tape = None
            for inp in inputs:
                inp.grad = None
        self._nodes = []


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if any(e <= 0 for e in arr.shape):
            raise ContractError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values with no recorded history."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss over the tape it was recorded on."""
    if loss._tape is None:
        raise ContractError("loss has no recorded history; run the forward pass inside a Tape")
    loss._tape.backward(loss)


# -- op plumbing -----------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(name, data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, validate finiteness, and record on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"op '{name}' produced non-finite values")
    tape = _active_tape()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        tape._record(name, inputs, out, backward_fn)
    return out


# -- primitives ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max is subtracted first)."""
    x = _as_tensor(x)
    xd = x.data
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result("softmax", y, (x,), bwd)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; the second operand may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        def bwd_s(g):
            return (g,)

        return _result("add_scalar", a.data + float(b), (a,), bwd_s)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def bwd(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _result("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    """Elementwise difference; the second operand may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        def bwd_s(g):
            return (g,)

        return _result("sub_scalar", a.data - float(b), (a,), bwd_s)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} and {b.shape}")

    def bwd(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _result("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise (Hadamard) product; the second operand may be a scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g * bd if a.requires_grad else None
        gb = g * ad if b.requires_grad else None
        return ga, gb

    return _result("mul", ad * bd, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply every element by the python scalar ``s``."""
    x = _as_tensor(x)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _result("scale", x.data * s, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result("reshape", x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; ``None`` reverses them (matrix transpose for 2-D)."""
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid axes permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back into place."""
    x = _as_tensor(x)
    data = x.data[key]
    if data.size == 0:
        raise ContractError("slice would produce an empty tensor")
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[key] = g
        return (gx,)

    return _result("slice", data.copy(), (x,), bwd)


def take(x: Tensor, indices) -> Tensor:
    """Gather elements of the flattened tensor at ``indices`` (1-D int array)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ContractError("take needs at least one index")
    if idx.min() < 0 or idx.max() >= x.size:
        raise ContractError(f"take index out of range for size {x.size}")
    shape = x.shape

    def bwd(g):
        gx = np.zeros(math.prod(shape), dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx.reshape(shape),)

    return _result("take", x.data.ravel()[idx].copy(), (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ranks = {t.ndim for t in ts}
    if len(ranks) != 1:
        raise ShapeError("concat operands must share rank")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                pieces.append(None)
        return tuple(pieces)

    return _result("concat", data, tuple(ts), bwd)


def tsum(x: Tensor, axis=None) -> Tensor:
    """Sum over all elements (axis=None gives a scalar) or along one axis."""
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        def bwd(g):
            return (np.full(shape, g, dtype=np.float64),)

        return _result("sum", np.sum(x.data), (x,), bwd)
    ax = int(axis)

    def bwd_ax(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result("sum", np.sum(x.data, axis=ax), (x,), bwd_ax)


def tmean(x: Tensor, axis=None) -> Tensor:
    """Arithmetic mean over all elements or along one axis."""
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.size

        def bwd(g):
            return (np.full(shape, g / n, dtype=np.float64),)

        return _result("mean", np.mean(x.data), (x,), bwd)
    ax = int(axis)
    n = shape[ax]

    def bwd_ax(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), shape).copy(),)

    return _result("mean", np.mean(x.data, axis=ax), (x,), bwd_ax)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):  # overflow becomes inf, caught by _result
        y = np.exp(x.data)

    def bwd(g):
        return (g * y,)

    return _result("exp", y, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    y = np.where(xd > 0.0, xd, slope * xd)

    def bwd(g):
        return (g * np.where(xd > 0.0, 1.0, slope),)

    return _result("leaky_relu", y, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation, smooth everywhere)."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * d,)

    return _result("gelu", y, (x,), bwd)


def clamp01(x: Tensor) -> Tensor:
    """Clip values to [0, 1]; gradient passes through the interior only."""
    x = _as_tensor(x)
    xd = x.data
    y = np.clip(xd, 0.0, 1.0)

    def bwd(g):
        return (g * ((xd >= 0.0) & (xd <= 1.0)),)

    return _result("clamp01", y, (x,), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Unfold a padded [C,H,W] array into a [C*kh*kw, Ho*Wo] column matrix."""
    c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (sc, sh, sw, sh * stride, sw * stride)
    )
    return view.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, cshape, kh: int, kw: int, stride: int, ho: int, wo: int):
    c, h, w = cshape
    dx = np.zeros((c, h, w), dtype=np.float64)
    d = dcols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += d[:, i, j]
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a single [Cin,H,W] map with filters [Cout,Cin,kh,kw].

    Optional per-output-channel bias ``b`` of shape [Cout].  The kernel must
    fit inside the padded input.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W] and w[Co,Ci,kh,kw], got {x.shape}, {w.shape}")
    cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, filters {cin_w}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d needs stride >= 1 and padding >= 0")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(cout, -1)
    out = w2 @ cols
    if b is not None:
        out = out + b.data[:, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            gx = dxp[:, padding : padding + h, padding : padding + wid] if padding else dxp
            gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        gb = g2.sum(axis=1) if b.requires_grad else None
        return gx, gw, gb

    return _result("conv2d", out.reshape(cout, ho, wo), inputs, bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of a [C,H,W] map."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _result("upsample2", y, (x,), bwd)


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-channel vector v[C] to every spatial position of x[C,H,W].

    This is the one structured broadcast the package allows; conv biases and
    timestep embeddings both go through it.
    """
    x, v = _as_tensor(x), _as_tensor(v)
    if x.ndim != 3 or v.ndim != 1 or v.shape[0] != x.shape[0]:
        raise ShapeError(f"add_channel expects x[C,H,W] and v[C], got {x.shape}, {v.shape}")

    def bwd(g):
        gx = g if x.requires_grad else None
        gv = g.sum(axis=(1, 2)) if v.requires_grad else None
        return gx, gv

    return _result("add_channel", x.data + v.data[:, None, None], (x, v), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between two equal-shape tensors (scalar output)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse needs equal shapes, got {a.shape} and {b.shape}")
    d = a.data - b.data
    n = d.size

    def bwd(g):
        c = 2.0 * g / n
        ga = c * d if a.requires_grad else None
        gb = -c * d if b.requires_grad else None
        return ga, gb

    return _result("mse", np.mean(d * d), (a, b), bwd)


def norm_l2(x: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor (scalar output)."""
    x = _as_tensor(x)
    n = float(np.sqrt(np.sum(x.data * x.data)))
    xd = x.data

    def bwd(g):
        if n == 0.0:
            return (np.zeros_like(xd),)  # subgradient at the origin
        return (g * xd / n,)

    return _result("norm_l2", np.float64(n), (x,), bwd)
