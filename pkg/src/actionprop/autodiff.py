"""Dense float64 tensors with taped reverse-mode differentiation.

The tape is a Wengert list: every primitive appends one entry in execution
order, and ``Tape.backward`` replays the entries in exact reverse order,
accumulating vector-Jacobian products into ``Tensor.grad``. Tensors and the
tape they are attached to form one single-threaded unit of work; distinct
tapes are fully independent.

Every primitive checks its output for NaN/Inf and raises ``NumericError``
on the spot, so non-finite values never propagate silently.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _check_finite(op: str, data: Array) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], vjp) -> None:
        self._entries.append((out, inputs, vjp))

    def backward(self, loss: "Tensor", params=None) -> None:
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor reached.

        ``loss`` must be a scalar recorded on this tape. Repeated calls
        accumulate additively. Parameters passed in ``params`` that the loss
        does not reach receive an explicit zero gradient.
        """
        if loss.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._entries):
            g = grads.get(id(out))
            if g is None:
                continue
            for tensor, piece in zip(inputs, vjp(g)):
                if piece is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + piece
                else:
                    grads[key] = piece
                    holders[key] = tensor
        for key, tensor in holders.items():
            g = grads[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)


class Tensor:
    """Row-major float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "grad")

    def __init__(self, data, tape: Tape | None = None):
        self.data = _as_array(data)
        _check_finite("tensor", self.data)
        self.tape = tape
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tape is not None})"

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
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


class Parameter(Tensor):
    """Named leaf tensor; optimizers update ``.data`` between steps."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def backward(loss: Tensor, params=None) -> None:
    """Reverse-mode sweep over the tape that produced ``loss``."""
    if loss.tape is None:
        raise ContractError("backward requires a tracked scalar")
    loss.tape.backward(loss, params)


def _merge_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _emit(op: str, data: Array, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(op, data)
    tape = _merge_tape(*inputs)
    out = Tensor(data, tape)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _split(a, b):
    """Normalize a binary op's operands to (tensors, raw arrays)."""
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and tb is None:
        raise ContractError("at least one operand must be a Tensor")
    da = ta.data if ta is not None else _as_array(a)
    db = tb.data if tb is not None else _as_array(b)
    if ta is not None and tb is not None and da.shape != db.shape:
        raise ShapeError(f"elementwise op on mismatched shapes {da.shape} and {db.shape}")
    return ta, tb, da, db


def _const_grad(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    ta, tb, da, db = _split(a, b)
    inputs = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        return tuple(_const_grad(g, t.data.shape) for t in inputs)

    return _emit("add", da + db, inputs, vjp)


def sub(a, b) -> Tensor:
    ta, tb, da, db = _split(a, b)
    inputs = tuple(t for t in (ta, tb) if t is not None)
    signs = tuple(s for t, s in ((ta, 1.0), (tb, -1.0)) if t is not None)

    def vjp(g):
        return tuple(_const_grad(s * g, t.data.shape) for t, s in zip(inputs, signs))

    return _emit("sub", da - db, inputs, vjp)


def mul(a, b) -> Tensor:
    ta, tb, da, db = _split(a, b)
    inputs = tuple(t for t in (ta, tb) if t is not None)
    others = tuple(o for t, o in ((ta, db), (tb, da)) if t is not None)

    def vjp(g):
        return tuple(_const_grad(g * o, t.data.shape) for t, o in zip(inputs, others))

    return _emit("mul", da * db, inputs, vjp)


def div(a, b) -> Tensor:
    ta, tb, da, db = _split(a, b)
    data = da / db
    inputs = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_const_grad(g / db, ta.data.shape))
        if tb is not None:
            out.append(_const_grad(-g * da / (db * db), tb.data.shape))
        return tuple(out)

    return _emit("div", data, inputs, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _emit("scale", a.data * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul requires [m x k] @ [k x n], got {a.data.shape} and {b.data.shape}"
        )
    da, db = a.data, b.data

    def vjp(g):
        return (g @ db.T, da.T @ g)

    return _emit("matmul", da @ db, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def vjp(g):
        return (g.T.copy(),)

    return _emit("transpose", a.data.T.copy(), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, a.data, 0.0), (a,), vjp)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", y, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return _emit("exp", y, (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log requires strictly positive input")

    def vjp(g):
        return (g / a.data,)

    return _emit("log", np.log(a.data), (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * mask,)

    return _emit("clip", np.clip(a.data, lo, hi), (a,), vjp)


def maximum(a, b) -> Tensor:
    ta, tb, da, db = _split(a, b)
    take_a = da >= db
    inputs = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_const_grad(g * take_a, ta.data.shape))
        if tb is not None:
            out.append(_const_grad(g * ~take_a, tb.data.shape))
        return tuple(out)

    return _emit("maximum", np.where(take_a, da, db), inputs, vjp)


def minimum(a, b) -> Tensor:
    ta, tb, da, db = _split(a, b)
    take_a = da <= db
    inputs = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_const_grad(g * take_a, ta.data.shape))
        if tb is not None:
            out.append(_const_grad(g * ~take_a, tb.data.shape))
        return tuple(out)

    return _emit("minimum", np.where(take_a, da, db), inputs, vjp)


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.data.sum(), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def take(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = _as_array(data)

    def vjp(g):
        z = np.zeros_like(a.data)
        if isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key):
            np.add.at(z, key, g)
        elif isinstance(key, np.ndarray):
            np.add.at(z, key, g)
        else:
            z[key] += g
        return (z,)

    return _emit("take", np.array(data, dtype=np.float64), (a,), vjp)


def repeat2(a: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsample along the last axis."""
    data = np.repeat(a.data, 2, axis=-1)

    def vjp(g):
        return (g.reshape(*g.shape[:-1], -1, 2).sum(axis=-1),)

    return _emit("repeat2", data, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix; every output row sums to 1."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax_rows", y, (a,), vjp)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is [C_in, T], ``weight`` [C_out, C_in, k], ``bias`` [C_out]; the
    output is [C_out, T_out] with T_out = floor((T + 2*padding - k)/stride) + 1.
    """
    if x.data.ndim != 2 or weight.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv1d expects x [C_in,T], weight [C_out,C_in,k], bias [C_out]; "
            f"got {x.data.shape}, {weight.data.shape}, {bias.data.shape}"
        )
    c_in, t = x.data.shape
    c_out, w_cin, k = weight.data.shape
    if w_cin != c_in or bias.data.shape[0] != c_out:
        raise ShapeError(
            f"conv1d channel mismatch: x {x.data.shape}, weight {weight.data.shape}, "
            f"bias {bias.data.shape}"
        )
    if stride < 1:
        raise ContractError(f"conv1d stride must be >= 1, got {stride}")
    if t + 2 * padding < k:
        raise ShapeError(
            f"conv1d kernel width {k} exceeds padded input length {t + 2 * padding}"
        )
    t_out = (t + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    # patches[c, tap, j] = xp[c, tap + stride*j]
    patches = np.empty((c_in, k, t_out))
    for tap in range(k):
        patches[:, tap, :] = xp[:, tap : tap + stride * t_out : stride]
    w2d = weight.data.reshape(c_out, c_in * k)
    data = w2d @ patches.reshape(c_in * k, t_out) + bias.data[:, None]

    def vjp(g):
        db = g.sum(axis=1)
        dw = (g @ patches.reshape(c_in * k, t_out).T).reshape(c_out, c_in, k)
        dpatch = (w2d.T @ g).reshape(c_in, k, t_out)
        dxp = np.zeros_like(xp)
        for tap in range(k):
            dxp[:, tap : tap + stride * t_out : stride] += dpatch[:, tap, :]
        dx = dxp[:, padding : padding + t] if padding else dxp
        return (dx, dw, db)

    return _emit("conv1d", data, (x, weight, bias), vjp)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head scaled dot-product self-attention with a residual.

    ``x`` is [T, D]; the four projections are [D, D]. Output is
    softmax(Q K^T / sqrt(D)) V Wo + x.
    """
    t, d = x.data.shape
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv), ("Wo", wo)):
        if w.data.shape != (d, d):
            raise ShapeError(f"{name} must be [{d} x {d}], got {w.data.shape}")
    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
    attn = softmax_rows(scores)
    return add(matmul(matmul(attn, v), wo), x)


def bce_with_logits(logit: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |logit|."""
    t = _as_array(target)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("bce_with_logits target must lie in [0, 1]")
    x = logit.data
    if t.shape != () and t.shape != x.shape:
        raise ShapeError(f"bce target shape {t.shape} does not match logits {x.shape}")
    data = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * (_sigmoid(x) - t),)

    return _emit("bce_with_logits", data, (logit,), vjp)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise smooth-L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    t = _as_array(target)
    d = pred.data - t
    inner = np.abs(d) < 1.0
    data = np.where(inner, 0.5 * d * d, np.abs(d) - 0.5)

    def vjp(g):
        return (g * np.where(inner, d, np.sign(d)),)

    return _emit("smooth_l1", data, (pred,), vjp)
