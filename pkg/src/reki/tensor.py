"""Minimal dense 2-D tensor math with a reverse-mode tape and Adam.

Everything trains in float64 (persisted stores truncate to float32
elsewhere). The op set is deliberately small and broadcasting is limited to
a row-vector bias add plus an explicit per-row scaling primitive, so every
backward rule below can be audited line by line.

Typical use::

    w = param(rng.normal(size=(4, 2)))
    with Tape() as tape:
        y = sigmoid(matmul(x, w))
        loss = bce_mean(y, labels)
    grads = backward(tape, loss)      # {tensor uid: gradient array}

Ops called outside a Tape context run in pure inference mode and record
nothing.
"""

from __future__ import annotations

import inspect
import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, RekiError, ShapeError
from .ioutil import crc64, pack_u16, pack_u32, pack_u64, unpack_u16, unpack_u32, unpack_u64

_CHECK_FINITE = True
_uid_counter = itertools.count(1)


def set_checked(flag: bool) -> bool:
    """Toggle the NaN/Inf assertion applied to every op output; returns the old value."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = flag
    return old


class Tensor:
    """A float64 array plus autodiff bookkeeping. Shape is (rows, cols) or () for scalars."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim not in (0, 2):
            raise ShapeError(f"tensors are 2-D matrices or scalars, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(uid={self.uid}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def const(data) -> Tensor:
    """A non-trainable leaf tensor (inputs, masks, frozen vectors)."""
    return Tensor(data, requires_grad=False)


@dataclass
class _Node:
    out_uid: int
    backward: Callable[[np.ndarray, Callable[[Tensor, np.ndarray], None]], None]


@dataclass
class Tape:
    """Linear record of ops in execution order; backward walks it once, reversed."""

    nodes: list[_Node] = field(default_factory=list)
    produced: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _wants_grad(self, t: Tensor) -> bool:
        return t.requires_grad or t.uid in self.produced


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], bw) -> Tensor:
    """Wrap an op result; record a node when a tape is active and grads are needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("op produced a non-finite value in checked mode")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape._wants_grad(t) for t in inputs):
        tape.produced.add(out.uid)
        tape.nodes.append(_Node(out.uid, bw))
    return out


def _check_2d(*tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"expected a 2-D operand, got shape {t.data.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may also be a (1, m) row bias."""
    _check_2d(a, b)
    row_bias = b.data.shape == (1, a.data.shape[1]) and a.data.shape[0] != 1
    if a.data.shape != b.data.shape and not row_bias:
        raise ShapeError(f"add shapes {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def bw(g, acc):
        acc(a, g)
        acc(b, g.sum(axis=0, keepdims=True) if row_bias else g)

    return _finish(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes {a.data.shape} vs {b.data.shape}")

    def bw(g, acc):
        acc(a, g)
        acc(b, -g)

    return _finish(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape matrices."""
    _check_2d(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} vs {b.data.shape}")
    a_data, b_data = a.data, b.data

    def bw(g, acc):
        acc(a, g * b_data)
        acc(b, g * a_data)

    return _finish(a_data * b_data, (a, b), bw)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x (n, m) by s[i, 0]; s must be (n, 1)."""
    _check_2d(x, s)
    if s.data.shape != (x.data.shape[0], 1):
        raise ShapeError(f"scale_rows needs s of shape ({x.data.shape[0]}, 1), got {s.data.shape}")
    x_data, s_data = x.data, s.data

    def bw(g, acc):
        acc(x, g * s_data)
        acc(s, (g * x_data).sum(axis=1, keepdims=True))

    return _finish(x_data * s_data, (x, s), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} vs {b.data.shape}")
    a_data, b_data = a.data, b.data

    def bw(g, acc):
        acc(a, g @ b_data.T)
        acc(b, a_data.T @ g)

    return _finish(a_data @ b_data, (a, b), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    if not parts:
        raise ShapeError("concat of zero parts")
    _check_2d(*parts)
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise ShapeError(f"concat row mismatch {parts[0].data.shape} vs {p.data.shape}")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    parts = list(parts)

    def bw(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[:, lo:hi])

    return _finish(np.concatenate([p.data for p in parts], axis=1), parts, bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(x)
    if not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.data.shape}")
    shape = x.data.shape

    def bw(g, acc):
        full = np.zeros(shape)
        full[:, start:stop] = g
        acc(x, full)

    return _finish(x.data[:, start:stop].copy(), (x,), bw)


def mean_rows(x: Tensor) -> Tensor:
    """Columnwise mean over rows: (n, m) -> (1, m)."""
    _check_2d(x)
    n = x.data.shape[0]

    def bw(g, acc):
        acc(x, np.repeat(g / n, n, axis=0))

    return _finish(x.data.mean(axis=0, keepdims=True), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    _check_2d(x)
    shape = x.data.shape

    def bw(g, acc):
        acc(x, np.full(shape, float(g)))

    return _finish(np.asarray(x.data.sum()), (x,), bw)


def relu(x: Tensor) -> Tensor:
    _check_2d(x)
    mask = x.data > 0

    def bw(g, acc):
        acc(x, g * mask)

    return _finish(np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    _check_2d(x)
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))

    def bw(g, acc):
        acc(x, g * y * (1.0 - y))

    return _finish(y, (x,), bw)


def softmax_rowwise(x: Tensor) -> Tensor:
    """Row softmax with max subtraction for stability."""
    _check_2d(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g, acc):
        acc(x, (g - (g * y).sum(axis=1, keepdims=True)) * y)

    return _finish(y, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of table (vocab, e) by an integer id vector (n,)."""
    _check_2d(table)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be a 1-D vector, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding id out of range for table shape {table.data.shape}")
    vocab_shape = table.data.shape

    def bw(g, acc):
        grad = np.zeros(vocab_shape)
        np.add.at(grad, ids, g)
        acc(table, grad)

    return _finish(table.data[ids], (table,), bw)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row k times: (n, m) -> (n*k, m)."""
    _check_2d(x)
    n, m = x.data.shape

    def bw(g, acc):
        acc(x, g.reshape(n, k, m).sum(axis=1))

    return _finish(np.repeat(x.data, k, axis=0), (x,), bw)


def segment_sum_rows(x: Tensor, k: int) -> Tensor:
    """Sum consecutive groups of k rows: (n*k, m) -> (n, m). Adjoint of repeat_rows."""
    _check_2d(x)
    nk, m = x.data.shape
    if nk % k != 0:
        raise ShapeError(f"segment size {k} does not divide row count {nk}")
    n = nk // k

    def bw(g, acc):
        acc(x, np.repeat(g, k, axis=0))

    return _finish(x.data.reshape(n, k, m).sum(axis=1), (x,), bw)


def bce_mean(p: Tensor, y) -> Tensor:
    """Batch-averaged binary cross-entropy of probabilities p (n, 1) vs labels y.

    Probabilities are clamped to [1e-12, 1 - 1e-12]; the clamp contributes
    zero gradient outside that range.
    """
    _check_2d(p)
    y = np.asarray(y, dtype=np.float64).reshape(p.data.shape)
    lo, hi = 1e-12, 1.0 - 1e-12
    inside = (p.data > lo) & (p.data < hi)
    pc = np.clip(p.data, lo, hi)
    n = pc.shape[0]
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))

    def bw(g, acc):
        acc(p, float(g) * inside * (pc - y) / (pc * (1.0 - pc)) / n)

    return _finish(np.asarray(loss), (p,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over the tape.

    Returns a map from tensor uid to gradient array; only tensors with
    requires_grad (and intermediates feeding them) appear.
    """
    if loss.data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.asarray(1.0)}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if not tape._wants_grad(t):
            return
        if t.uid in grads:
            grads[t.uid] = grads[t.uid] + g
        else:
            grads[t.uid] = g

    for node in reversed(tape.nodes):
        g = grads.get(node.out_uid)
        if g is None:
            continue
        node.backward(g, acc)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators keyed by tensor uid, plus the step count."""

    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Iterable[Tensor], grads: Mapping[int, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place; params without a grad are skipped."""
    state.t += 1
    t = state.t
    for p in params:
        g = grads.get(p.uid)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} vs param shape {p.data.shape}")
        m = state.m.get(p.uid)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[p.uid] = m
            state.v[p.uid] = np.zeros_like(p.data)
        v = state.v[p.uid]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    coords_checked: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(model_closure: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, Tensor], step: float = 1e-6,
               n_coords: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    Samples up to `n_coords` coordinates across all params. The error is
    relative with an absolute floor of 1e-2 on the denominator, so
    near-zero derivative pairs are compared absolutely instead of blowing
    up on finite-difference noise.
    """
    sig = inspect.signature(model_closure)
    try:
        sig.bind(params)
    except TypeError as exc:
        raise RekiError(f"model closure must accept the params mapping: {exc}") from None

    with Tape() as tape:
        loss = model_closure(params)
    grads = backward(tape, loss)

    coords: list[tuple[str, tuple[int, ...]]] = []
    for name, p in params.items():
        for idx in np.ndindex(*p.data.shape):
            coords.append((name, idx))
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = GradCheckReport(0.0, "", (), len(coords))
    for name, idx in coords:
        p = params[name]
        ad = grads.get(p.uid, np.zeros_like(p.data))[idx]
        orig = p.data[idx]
        p.data[idx] = orig + step
        f_plus = float(model_closure(params).data)
        p.data[idx] = orig - step
        f_minus = float(model_closure(params).data)
        p.data[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-2)
        if rel > worst.max_rel_error:
            worst.max_rel_error = rel
            worst.worst_param = name
            worst.worst_index = idx
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"REKIPAR1"


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    """Write named float64 tensors: magic, u32 count, records, trailing CRC-64."""
    body = bytearray()
    body += pack_u32(len(params))
    for name, p in params.items():
        encoded = name.encode("utf-8")
        body += pack_u16(len(encoded))
        body += encoded
        dims = p.data.shape
        body += struct.pack("<B", len(dims))
        for d in dims:
            body += pack_u32(d)
        body += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(body)
        fh.write(pack_u64(crc64(bytes(body))))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CKPT_MAGIC) + 12 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise RekiError(f"not a parameter checkpoint: {path}")
    body, stored = raw[len(_CKPT_MAGIC):-8], raw[-8:]
    if crc64(body) != struct.unpack("<Q", stored)[0]:
        raise RekiError(f"checkpoint CRC mismatch: {path}")
    out: dict[str, np.ndarray] = {}
    offset = 0
    count, offset = unpack_u32(body, offset)
    for _ in range(count):
        name_len, offset = unpack_u16(body, offset)
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        ndim = body[offset]
        offset += 1
        dims = []
        for _ in range(ndim):
            d, offset = unpack_u32(body, offset)
            dims.append(d)
        n_bytes = int(np.prod(dims, dtype=np.int64)) * 8 if dims else 8
        arr = np.frombuffer(body[offset:offset + n_bytes], dtype="<f8").reshape(dims)
        offset += n_bytes
        out[name] = arr.astype(np.float64)
    return out
