"""Tape-based reverse-mode autodiff over numpy arrays.

Every op records onto the active :class:`Tape` only when one of its inputs
needs a gradient.  Ops save the buffers their backward rule consumes and tag
each one as an *activation* (an input held for a weight gradient) or an
*activation derivative* (the sigma' buffer of a nonlinearity).  Parameter
arrays that an op keeps a reference to are not counted: they live in memory
regardless of training.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "GradientMap",
    "MemoryLedger",
    "ShapeError",
    "TapeError",
    "OPS",
    "AUX_OPS",
    "record",
    "backward",
    "grad_check",
    "ledger_snapshot",
    "no_grad",
    "segment",
    "flop_counter",
    "matmul",
    "add",
    "mul",
    "relu",
    "softmax_rows",
    "layernorm",
    "conv1d_k3",
    "gap",
    "mse_like",
    "transpose",
    "scale",
    "sigmoid",
    "cross_entropy",
    "mask_rows",
]

DEFAULT_DTYPE = np.float64
LN_EPS = 1e-5

_uid = itertools.count()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array plus the bookkeeping needed to sit on a tape."""

    __slots__ = ("values", "requires_grad", "name", "param", "segment", "uid", "_node")

    def __init__(self, values, requires_grad=False, name=None, dtype=None, param=False):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.param = param
        self.segment = _segment.get()
        self.uid = next(_uid)
        self._node = None  # (tape, generation, index) for recorded outputs

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def node_id(self):
        return None if self._node is None else self._node[2]

    def detach(self) -> "Tensor":
        """Constant view of the same values; gradients never flow through it."""
        t = Tensor(self.values)
        t.segment = self.segment
        return t

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)


def Parameter(values, name=None, requires_grad=True) -> Tensor:
    return Tensor(np.array(values, dtype=DEFAULT_DTYPE), requires_grad=requires_grad,
                  name=name, param=True)


# ---------------------------------------------------------------------------
# context: active tape, segment tag, no-grad, flop counting

_segment: contextvars.ContextVar[str] = contextvars.ContextVar("segment", default="default")
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_flops: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar("flops", default=None)


@contextlib.contextmanager
def segment(name: str):
    """Tag every tensor and recorded op created inside the block with ``name``."""
    token = _segment.set(name)
    try:
        yield
    finally:
        _segment.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@dataclass
class FlopCounter:
    total: int = 0
    by_segment: dict = field(default_factory=dict)

    def add(self, n: int):
        self.total += n
        seg = _segment.get()
        self.by_segment[seg] = self.by_segment.get(seg, 0) + n


@contextlib.contextmanager
def flop_counter():
    """Count multiply-add FLOPs (2 per MAC) of matmul and conv1d_k3 executed inside."""
    counter = FlopCounter()
    token = _flops.set(counter)
    try:
        yield counter
    finally:
        _flops.reset(token)


def _count(n: int):
    c = _flops.get()
    if c is not None:
        c.add(int(n))


# ---------------------------------------------------------------------------
# tape

@dataclass
class _Record:
    op: "Op"
    inputs: tuple
    output: Tensor
    attrs: dict
    saved: dict
    kinds: dict
    segment: str


class Tape:
    """Ordered op log for one forward/backward cycle.

    Use as a context manager to make it the active tape.  After ``backward``
    the saved buffers are released; the next recorded op starts a new
    generation, which invalidates every tensor produced before it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.generation = 0
        self.consumed = False
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._tokens.pop())

    def reset(self):
        self.records = []
        self.generation += 1
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def _append(self, rec: _Record) -> int:
        if self.consumed:
            self.reset()
        self.records.append(rec)
        return len(self.records) - 1

    def backward(self, loss: Tensor) -> "GradientMap":
        return backward(loss)


_default_tape = Tape()


def current_tape() -> Tape:
    tape = _active_tape.get()
    return tape if tape is not None else _default_tape


class GradientMap:
    """Gradients of requires_grad leaves, looked up by tensor (or its uid)."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def _accumulate(self, leaf: Tensor, g: np.ndarray):
        if leaf.uid in self._grads:
            self._grads[leaf.uid] = self._grads[leaf.uid] + g
        else:
            self._grads[leaf.uid] = np.array(g, dtype=leaf.values.dtype, copy=True)
            self._leaves[leaf.uid] = leaf

    def _key(self, k):
        return k.uid if isinstance(k, Tensor) else k

    def __getitem__(self, k) -> np.ndarray:
        return self._grads[self._key(k)]

    def get(self, k, default=None):
        return self._grads.get(self._key(k), default)

    def __contains__(self, k) -> bool:
        return self._key(k) in self._grads

    def __len__(self):
        return len(self._grads)

    def keys(self):
        return self._grads.keys()

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def items(self):
        return ((self._leaves[k], g) for k, g in self._grads.items())


# ---------------------------------------------------------------------------
# ops

class Op:
    name: str = ""

    def check(self, *arrays, **attrs):
        pass

    def forward(self, ctx: "_Ctx", *arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, ctx: "_Ctx", g: np.ndarray) -> tuple:
        raise NotImplementedError


class _Ctx:
    """Per-call scratch: which inputs need gradients and what was saved."""

    def __init__(self, needs, inputs, attrs):
        self.needs = needs
        self.inputs = inputs
        self.attrs = attrs
        self.saved: dict[str, np.ndarray] = {}
        self.kinds: dict[str, str] = {}
        self.shapes = tuple(t.shape for t in inputs)

    def save(self, key, arr, kind):
        # kind: "a" activation, "sigma" activation derivative, "param" uncounted
        self.saved[key] = arr
        self.kinds[key] = kind

    def save_input(self, key, i):
        t = self.inputs[i]
        self.save(key, t.values, "param" if t.param else "a")


def _err(op, *shapes, why=""):
    shp = " and ".join(str(tuple(s)) for s in shapes)
    raise ShapeError(f"{op}: incompatible shapes {shp}" + (f" ({why})" if why else ""))


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    out = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


class MatMul(Op):
    """(..., N, K) @ (K, M) or batched (..., N, K) @ (..., K, M)."""

    name = "matmul"

    def check(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            _err(self.name, a.shape, b.shape, "operands need rank >= 2")
        if a.shape[-1] != b.shape[-2]:
            _err(self.name, a.shape, b.shape, "inner dims differ")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            _err(self.name, a.shape, b.shape, "batch dims differ")

    def forward(self, ctx, a, b):
        if ctx.needs[1]:
            ctx.save_input("a", 0)
        if ctx.needs[0]:
            ctx.save_input("b", 1)
        out = a @ b
        _count(2 * out.size * a.shape[-1])
        return out

    def backward(self, ctx, g):
        ga = gb = None
        if ctx.needs[0]:
            ga = g @ np.swapaxes(ctx.saved["b"], -1, -2)
        if ctx.needs[1]:
            a = ctx.saved["a"]
            if len(ctx.shapes[1]) == 2:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


class Add(Op):
    """Same shape, or b broadcast as a trailing-suffix (bias) or scalar."""

    name = "add"

    def check(self, a, b):
        if a.shape == b.shape or b.size == 1 and b.ndim <= 1:
            return
        if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
            return
        _err(self.name, a.shape, b.shape)

    def forward(self, ctx, a, b):
        return a + (b.reshape(()) if b.size == 1 and b.ndim <= 1 and a.shape != b.shape else b)

    def backward(self, ctx, g):
        return (g if ctx.needs[0] else None,
                _sum_to_any(g, ctx.shapes[1]) if ctx.needs[1] else None)


def _sum_to_any(g, shape):
    if g.shape == tuple(shape):
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return _sum_to(g, shape)


class Mul(Op):
    """Elementwise product; same shape, or either side a scalar."""

    name = "mul"

    def check(self, a, b):
        if a.shape == b.shape or (a.size == 1 and a.ndim <= 1) or (b.size == 1 and b.ndim <= 1):
            return
        _err(self.name, a.shape, b.shape)

    def forward(self, ctx, a, b):
        if ctx.needs[0]:
            ctx.save_input("b", 1)
        if ctx.needs[1]:
            ctx.save_input("a", 0)
        return a * b

    def backward(self, ctx, g):
        ga = gb = None
        if ctx.needs[0]:
            b = ctx.saved["b"]
            ga = _sum_to_any(g * b, ctx.shapes[0])
        if ctx.needs[1]:
            a = ctx.saved["a"]
            gb = _sum_to_any(g * a, ctx.shapes[1])
        return ga, gb


class ReLU(Op):
    name = "relu"

    def forward(self, ctx, x):
        mask = x > 0
        if ctx.needs[0]:
            ctx.save("mask", mask, "sigma")
        return np.where(mask, x, 0.0)

    def backward(self, ctx, g):
        return (g * ctx.saved["mask"],)


class SoftmaxRows(Op):
    name = "softmax_rows"

    def check(self, x):
        if x.ndim < 1:
            _err(self.name, x.shape, why="needs rank >= 1")

    def forward(self, ctx, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        if ctx.needs[0]:
            ctx.save("y", y, "sigma")
        return y

    def backward(self, ctx, g):
        y = ctx.saved["y"]
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class LayerNorm(Op):
    """Normalise over the last axis, then scale by gamma and shift by beta."""

    name = "layernorm"

    def check(self, x, gamma, beta):
        d = x.shape[-1:]
        if gamma.shape != d or beta.shape != d:
            _err(self.name, x.shape, gamma.shape, beta.shape)

    def forward(self, ctx, x, gamma, beta, eps=LN_EPS):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * rstd
        if ctx.needs[0] or ctx.needs[1]:
            ctx.save("xhat", xhat, "sigma")
        if ctx.needs[0]:
            ctx.save("rstd", rstd, "sigma")
            ctx.save_input("gamma", 1)
        return xhat * gamma + beta

    def backward(self, ctx, g):
        gx = gg = gb = None
        if ctx.needs[0]:
            xhat, rstd = ctx.saved["xhat"], ctx.saved["rstd"]
            gxh = g * ctx.saved["gamma"]
            gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        if ctx.needs[1]:
            gg = (g * ctx.saved["xhat"]).reshape(-1, g.shape[-1]).sum(axis=0)
        if ctx.needs[2]:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gg, gb


class Conv1dK3(Op):
    """Kernel-3 convolution along the token axis, zero padded so N is kept.

    x: (..., N, C_in), w: (3, C_in, C_out), bias: (C_out,).
    """

    name = "conv1d_k3"

    def check(self, x, w, bias):
        if x.ndim < 2 or w.ndim != 3 or w.shape[0] != 3 or w.shape[1] != x.shape[-1]:
            _err(self.name, x.shape, w.shape)
        if bias.shape != (w.shape[2],):
            _err(self.name, w.shape, bias.shape, "bias must match C_out")

    @staticmethod
    def _pad(x):
        width = [(0, 0)] * x.ndim
        width[-2] = (1, 1)
        return np.pad(x, width)

    def forward(self, ctx, x, w, bias):
        n = x.shape[-2]
        xp = self._pad(x)
        out = sum(xp[..., k:k + n, :] @ w[k] for k in range(3)) + bias
        _count(2 * 3 * out.size * x.shape[-1])
        if ctx.needs[1]:
            ctx.save_input("x", 0)
        if ctx.needs[0]:
            ctx.save_input("w", 1)
        return out

    def backward(self, ctx, g):
        gx = gw = gb = None
        n = g.shape[-2]
        if ctx.needs[0]:
            w = ctx.saved["w"]
            shp = list(g.shape)
            shp[-2] += 2
            shp[-1] = w.shape[1]
            gp = np.zeros(shp, dtype=g.dtype)
            for k in range(3):
                gp[..., k:k + n, :] += g @ w[k].T
            gx = gp[..., 1:-1, :]
        if ctx.needs[1]:
            xp = self._pad(ctx.saved["x"])
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([xp[..., k:k + n, :].reshape(-1, xp.shape[-1]).T @ g2 for k in range(3)])
        if ctx.needs[2]:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb


class GAP(Op):
    """Mean over the token axis: (..., N, D) -> (..., D)."""

    name = "gap"

    def check(self, x):
        if x.ndim < 2:
            _err(self.name, x.shape, why="needs rank >= 2")

    def forward(self, ctx, x):
        return x.mean(axis=-2)

    def backward(self, ctx, g):
        n = ctx.shapes[0][-2]
        return (np.broadcast_to(np.expand_dims(g, -2) / n, ctx.shapes[0]).copy(),)


class MSELike(Op):
    """sum(w_row * (a - b)**2); ``row_weights`` has one entry per row (axis -2)."""

    name = "mse_like"

    def check(self, a, b, row_weights=None):
        if a.shape != b.shape:
            _err(self.name, a.shape, b.shape)
        if row_weights is not None:
            rw = np.asarray(row_weights)
            if a.ndim < 2 or rw.shape != (a.shape[-2],):
                _err(self.name, a.shape, rw.shape, "row weights must have one entry per row")

    def forward(self, ctx, a, b, row_weights=None):
        d = a - b
        sq = d * d
        if row_weights is not None:
            sq = sq * np.asarray(row_weights, dtype=a.dtype)[:, None]
        if ctx.needs[0] or ctx.needs[1]:
            ctx.save("d", d, "a")
        return np.asarray(sq.sum())

    def backward(self, ctx, g):
        d = ctx.saved["d"]
        rw = ctx.attrs.get("row_weights")
        ga = 2.0 * g * d
        if rw is not None:
            ga = ga * np.asarray(rw, dtype=d.dtype)[:, None]
        return (ga if ctx.needs[0] else None, -ga if ctx.needs[1] else None)


# structural helpers: needed to wire the model, not part of the counted op set

class Transpose(Op):
    name = "transpose"

    def check(self, x):
        if x.ndim < 2:
            _err(self.name, x.shape, why="needs rank >= 2")

    def forward(self, ctx, x):
        return np.swapaxes(x, -1, -2)

    def backward(self, ctx, g):
        return (np.swapaxes(g, -1, -2),)


class Scale(Op):
    name = "scale"

    def forward(self, ctx, x, c=1.0):
        return x * c

    def backward(self, ctx, g):
        return (g * ctx.attrs["c"],)


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, ctx, x):
        y = 1.0 / (1.0 + np.exp(-x))
        if ctx.needs[0]:
            ctx.save("y", y, "sigma")
        return y

    def backward(self, ctx, g):
        y = ctx.saved["y"]
        return (g * y * (1.0 - y),)


class CrossEntropy(Op):
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""

    name = "cross_entropy"

    def check(self, logits, labels=None):
        labels = np.asarray(labels)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            _err(self.name, logits.shape, labels.shape)

    def forward(self, ctx, logits, labels=None):
        labels = np.asarray(labels)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        if ctx.needs[0]:
            ctx.save("p", np.exp(logp), "sigma")
        return np.asarray(-logp[np.arange(len(labels)), labels].mean())

    def backward(self, ctx, g):
        labels = np.asarray(ctx.attrs["labels"])
        p = ctx.saved["p"].copy()
        p[np.arange(len(labels)), labels] -= 1.0
        return (g * p / len(labels),)


class MaskRows(Op):
    """Replace rows i with m_i = 1 by ``token``: (..., N, D), token (D,)."""

    name = "mask_rows"

    def check(self, x, token, m=None):
        m = np.asarray(m)
        if x.ndim < 2 or m.shape != (x.shape[-2],):
            _err(self.name, x.shape, m.shape, "mask length must equal N")
        if token.shape != x.shape[-1:]:
            _err(self.name, x.shape, token.shape)

    def forward(self, ctx, x, token, m=None):
        sel = np.asarray(m, dtype=bool)[:, None]
        return np.where(sel, token, x)

    def backward(self, ctx, g):
        sel = np.asarray(ctx.attrs["m"], dtype=bool)[:, None]
        gx = np.where(sel, 0.0, g) if ctx.needs[0] else None
        gt = np.where(sel, g, 0.0).reshape(-1, g.shape[-1]).sum(axis=0) if ctx.needs[1] else None
        return gx, gt


OPS: dict[str, Op] = {op.name: op for op in (
    MatMul(), Add(), Mul(), ReLU(), SoftmaxRows(), LayerNorm(), Conv1dK3(), GAP(), MSELike(),
)}
AUX_OPS: dict[str, Op] = {op.name: op for op in (
    Transpose(), Scale(), Sigmoid(), CrossEntropy(), MaskRows(),
)}
_REGISTRY = {**OPS, **AUX_OPS}


def _tape_of(inputs: Sequence[Tensor]) -> Tape:
    tape = None
    for t in inputs:
        if t._node is None:
            continue
        owner, gen, _ = t._node
        if owner.generation != gen:
            raise TapeError("input tensor belongs to a tape generation that was already released")
        if tape is not None and owner is not tape:
            raise TapeError("op mixes tensors recorded on different tapes")
        tape = owner
    active = current_tape()
    if tape is not None and _active_tape.get() is not None and tape is not active:
        raise TapeError("op mixes tensors recorded on different tapes")
    return tape if tape is not None else active


def record(op_kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run ``op_kind`` on ``inputs`` and append it to the tape when a gradient is needed."""
    try:
        op = _REGISTRY[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    inputs = tuple(t if isinstance(t, Tensor) else Tensor(t) for t in inputs)
    arrays = tuple(t.values for t in inputs)
    op.check(*arrays, **attrs)

    tracking = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    tape = _tape_of(inputs) if tracking else None
    needs = tuple(tracking and t.requires_grad for t in inputs)
    ctx = _Ctx(needs, inputs, attrs)
    out = Tensor(op.forward(ctx, *arrays, **attrs), requires_grad=tracking)
    if tracking:
        rec = _Record(op, inputs, out, attrs, ctx.saved, ctx.kinds, _segment.get())
        idx = tape._append(rec)
        out._node = (tape, tape.generation, idx)
    return out


def matmul(a, b):
    return record("matmul", a, b)


def add(a, b):
    return record("add", a, b)


def mul(a, b):
    return record("mul", a, b)


def relu(x):
    return record("relu", x)


def softmax_rows(x):
    return record("softmax_rows", x)


def layernorm(x, gamma, beta):
    return record("layernorm", x, gamma, beta)


def conv1d_k3(x, w, bias):
    return record("conv1d_k3", x, w, bias)


def gap(x):
    return record("gap", x)


def mse_like(a, b, row_weights=None):
    return record("mse_like", a, b, row_weights=row_weights)


def transpose(x):
    return record("transpose", x)


def scale(x, c: float):
    return record("scale", x, c=float(c))


def sigmoid(x):
    return record("sigmoid", x)


def cross_entropy(logits, labels):
    return record("cross_entropy", logits, labels=np.asarray(labels))


def mask_rows(x, token, m):
    return record("mask_rows", x, token, m=np.asarray(m, dtype=bool))


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss; releases every saved buffer afterwards."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradientMap()
    if loss._node is None:
        if loss.requires_grad:
            grads._accumulate(loss, np.ones_like(loss.values))
        return grads
    tape, gen, idx = loss._node
    if tape.consumed or tape.generation != gen:
        raise TapeError("backward already ran for this forward pass; record a new forward first")

    pending: dict[int, np.ndarray] = {idx: np.ones_like(loss.values)}
    for i in range(idx, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        rec = tape.records[i]
        ctx = _Ctx(tuple(t.requires_grad for t in rec.inputs), rec.inputs, rec.attrs)
        ctx.saved, ctx.kinds = rec.saved, rec.kinds
        in_grads = rec.op.backward(ctx, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                grads._accumulate(t, gi)
            else:
                j = t._node[2]
                pending[j] = pending[j] + gi if j in pending else gi
    for rec in tape.records:
        rec.saved = {}
        rec.kinds = {}
    tape.consumed = True
    return grads


# ---------------------------------------------------------------------------
# memory ledger

@dataclass
class MemoryLedger:
    """Scalars retained for backward, split into {a} and {sigma'} per segment."""

    activations_stored: int = 0
    act_derivs_stored: int = 0
    per_segment: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.activations_stored + self.act_derivs_stored

    def segment_total(self, name: str) -> int:
        s = self.per_segment.get(name)
        return 0 if s is None else s["a"] + s["sigma"]

    def __add__(self, other: "MemoryLedger") -> "MemoryLedger":
        seg = {k: dict(v) for k, v in self.per_segment.items()}
        for k, v in other.per_segment.items():
            cur = seg.setdefault(k, {"a": 0, "sigma": 0})
            cur["a"] += v["a"]
            cur["sigma"] += v["sigma"]
        return MemoryLedger(self.activations_stored + other.activations_stored,
                            self.act_derivs_stored + other.act_derivs_stored, seg)

    def as_dict(self) -> dict:
        return {"activations_stored": self.activations_stored,
                "act_derivs_stored": self.act_derivs_stored,
                "per_segment": {k: dict(v) for k, v in sorted(self.per_segment.items())}}


def ledger_snapshot(tape: Tape | None = None) -> MemoryLedger:
    """Count the buffers currently held for backward, deduplicated by array identity."""
    tape = tape or current_tape()
    seen: set[int] = set()
    ledger = MemoryLedger()
    for rec in tape.records:
        for key, arr in rec.saved.items():
            kind = rec.kinds[key]
            if kind == "param" or id(arr) in seen:
                continue
            seen.add(id(arr))
            seg = ledger.per_segment.setdefault(rec.segment, {"a": 0, "sigma": 0})
            seg[kind] += arr.size
            if kind == "a":
                ledger.activations_stored += arr.size
            else:
                ledger.act_derivs_stored += arr.size
    return ledger


# ---------------------------------------------------------------------------
# finite-difference check

def grad_check(forward_fn: Callable[..., Tensor], point: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``forward_fn(*point)`` must return a scalar Tensor and be deterministic.
    The values of ``point`` are restored on exit.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = list(point)
    for t in point:
        # perturbation below writes through a flat view
        if not t.values.flags.c_contiguous:
            t.values = np.ascontiguousarray(t.values)
    with no_grad():
        f0 = forward_fn(*point).item()
        f1 = forward_fn(*point).item()
    if f0 != f1:
        raise ValueError(f"forward_fn is not deterministic ({f0!r} != {f1!r})")

    tape = Tape()
    with tape:
        loss = forward_fn(*point)
        grads = backward(loss)

    worst = 0.0
    with no_grad():
        for t in point:
            analytic = grads.get(t)
            if analytic is None:
                analytic = np.zeros_like(t.values)
            flat = t.values.reshape(-1)
            an = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = forward_fn(*point).item()
                flat[i] = orig - h
                fm = forward_fn(*point).item()
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                worst = max(worst, abs(an[i] - fd) / max(1.0, abs(fd)))
    return worst
