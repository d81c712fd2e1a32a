"""Dense reverse-mode differentiation over numpy arrays.

A ``Tape`` records primitive operations in creation order; ``Tape.backward``
replays them in reverse. Cotangents may carry extra leading axes, which lets
one backward pass produce many vector-Jacobian products at once (used to get
one gradient row per model output).

Parameters live in a ``ParamStore``: one flat float64 vector plus a layout of
named blocks, ordered by layer so that the parameters of layers ``l..`` form a
contiguous suffix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class BadLayerIndex(IndexError):
    pass


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Block:
    layer: int
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParamStore:
    """Flat parameter vector with a (layer, name) -> slice layout.

    Layers run 0..num_layers+1; blocks are kept sorted by layer (stable within
    a layer), so ``suffix_offset(l)`` marks where layers ``>= l`` begin.
    """

    def __init__(self, blocks, num_layers: int, seeds: dict | None = None):
        ordered = sorted(enumerate(blocks), key=lambda t: (t[1][0], t[0]))
        self.num_layers = int(num_layers)
        self.seeds = dict(seeds or {})
        self.layout: dict[str, Block] = {}
        chunks = []
        offset = 0
        for _, (layer, name, arr) in ordered:
            arr = np.asarray(arr, dtype=np.float64)
            if name in self.layout:
                raise ValueError(f"duplicate block {name!r}")
            self.layout[name] = Block(int(layer), name, offset, tuple(arr.shape))
            chunks.append(arr.ravel())
            offset += arr.size
        self.vector = np.concatenate(chunks) if chunks else np.zeros(0)

    @property
    def p(self) -> int:
        return int(self.vector.size)

    def blocks(self) -> list[Block]:
        return list(self.layout.values())

    def view(self, name: str) -> np.ndarray:
        b = self.layout[name]
        return self.vector[b.offset:b.stop].reshape(b.shape)

    def items(self):
        for name, b in self.layout.items():
            yield b.layer, name, self.view(name).copy()

    def suffix_offset(self, l: int) -> int:
        if not 1 <= l <= self.num_layers:
            raise BadLayerIndex(f"layer {l} outside 1..{self.num_layers}")
        for b in self.layout.values():
            if b.layer >= l:
                return b.offset
        return self.p

    def layer_mask(self, layers) -> np.ndarray:
        layers = set(layers)
        mask = np.zeros(self.p, dtype=bool)
        for b in self.layout.values():
            if b.layer in layers:
                mask[b.offset:b.stop] = True
        return mask

    def indices(self, names) -> np.ndarray:
        parts = [np.arange(self.layout[n].offset, self.layout[n].stop) for n in names]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def copy(self) -> "ParamStore":
        new = object.__new__(ParamStore)
        new.num_layers = self.num_layers
        new.seeds = dict(self.seeds)
        new.layout = dict(self.layout)
        new.vector = self.vector.copy()
        return new

    def same_layout(self, other: "ParamStore") -> bool:
        return self.layout == other.layout

    def digest(self) -> str:
        return hashlib.sha256(self.vector.astype("<f8").tobytes()).hexdigest()[:16]

    # checkpoint: one JSON header line, then the raw little-endian vector
    def to_bytes(self) -> bytes:
        header = {
            "version": CHECKPOINT_VERSION,
            "num_layers": self.num_layers,
            "seeds": self.seeds,
            "p": self.p,
            "layout": [[b.layer, b.name, b.offset, list(b.shape)] for b in self.layout.values()],
        }
        return json.dumps(header, sort_keys=True).encode() + b"\n" + self.vector.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        head, _, body = data.partition(b"\n")
        header = json.loads(head)
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
        if vec.size != header["p"]:
            raise ValueError("checkpoint length does not match its header")
        new = object.__new__(cls)
        new.num_layers = header["num_layers"]
        new.seeds = header["seeds"]
        new.layout = {}
        for layer, name, offset, shape in header["layout"]:
            new.layout[name] = Block(layer, name, offset, tuple(shape))
        new.vector = vec
        return new

    def save(self, path) -> None:
        from .tracegen import write_atomic

        write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# tape


class Var:
    __slots__ = ("value", "tape", "idx", "needs_grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, idx, needs_grad):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, grad={self.needs_grad})"


@dataclass
class _Entry:
    out: Var
    parents: tuple
    vjps: tuple
    param: tuple | None = None  # (offset, size) for parameter leaves


class Tape:
    """Record of one forward pass."""

    def __init__(self, store: ParamStore | None = None):
        self.store = store
        self.entries: list[_Entry] = []
        self.output: Var | None = None
        self._params: dict[str, Var] = {}

    def _new(self, value, parents=(), vjps=(), param=None, needs_grad=None):
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        var = Var(np.asarray(value, dtype=np.float64), self, len(self.entries), needs_grad)
        self.entries.append(_Entry(var, tuple(parents), tuple(vjps), param))
        return var

    def const(self, value) -> Var:
        return self._new(value, needs_grad=False)

    def param(self, name: str) -> Var:
        if name not in self._params:
            b = self.store.layout[name]
            self._params[name] = self._new(self.store.view(name), param=(b.offset, b.size), needs_grad=True)
        return self._params[name]

    def backward(self, out: Var | None = None, seed=None) -> np.ndarray:
        """Vector-Jacobian product of ``out`` with ``seed`` (default ones).

        ``seed`` may have extra leading axes; the result then has the same
        leading axes followed by the flat parameter dimension.
        """
        out = self.output if out is None else out
        if out is None:
            raise ValueError("nothing to differentiate")
        if seed is None:
            seed = np.ones_like(out.value)
        seed = np.asarray(seed, dtype=np.float64)
        nl = seed.ndim - out.value.ndim
        if nl < 0 or seed.shape[nl:] != out.value.shape:
            raise ShapeMismatch(f"seed shape {seed.shape} does not end with {out.value.shape}")
        lead = seed.shape[:nl]
        p = self.store.p if self.store is not None else 0
        flat = np.zeros(lead + (p,))
        if not out.needs_grad:
            return flat
        grads: dict[int, np.ndarray] = {out.idx: seed}
        for entry in reversed(self.entries[: out.idx + 1]):
            g = grads.pop(entry.out.idx, None)
            if g is None:
                continue
            if entry.param is not None:
                off, size = entry.param
                flat[..., off:off + size] += g.reshape(lead + (size,))
                continue
            for parent, vjp in zip(entry.parents, entry.vjps):
                if not parent.needs_grad:
                    continue
                contrib = vjp(g, nl)
                prev = grads.get(parent.idx)
                grads[parent.idx] = contrib if prev is None else prev + contrib
        return flat

    def jacobian(self, out: Var, rows=None) -> np.ndarray:
        """Gradient of every element of ``out`` (or of selected flat positions)."""
        size = out.value.size
        rows = np.arange(size) if rows is None else np.asarray(rows)
        seed = np.zeros((rows.size, size))
        seed[np.arange(rows.size), rows] = 1.0
        return self.backward(out, seed.reshape((rows.size,) + out.value.shape))


def _wrap(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g, shape, nl):
    extra = g.ndim - nl - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(nl, nl + extra)))
    axes = tuple(nl + i for i, s in enumerate(shape) if s == 1 and g.shape[nl + i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    sa, sb = a.value.shape, b.value.shape
    return t._new(a.value + b.value, (a, b), (lambda g, nl: _unbroadcast(g, sa, nl),
                                              lambda g, nl: _unbroadcast(g, sb, nl)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    sa, sb = a.value.shape, b.value.shape
    return t._new(a.value - b.value, (a, b), (lambda g, nl: _unbroadcast(g, sa, nl),
                                              lambda g, nl: -_unbroadcast(g, sb, nl)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    av, bv = a.value, b.value
    return t._new(av * bv, (a, b), (lambda g, nl: _unbroadcast(g * bv, av.shape, nl),
                                    lambda g, nl: _unbroadcast(g * av, bv.shape, nl)))


def matmul(a, b) -> Var:
    """``a @ b`` with numpy semantics; both operands need ndim >= 2."""
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp_a(g, nl):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape, nl)

    if bv.ndim == 2:
        def vjp_b(g, nl):
            # one GEMM: contract every batch axis of a against g
            k, n = bv.shape
            a2 = av.reshape(-1, k)
            lead = g.shape[:nl]
            lsize = int(np.prod(lead, dtype=np.int64))
            gb = g.reshape(lsize, a2.shape[0], n).transpose(1, 0, 2).reshape(a2.shape[0], lsize * n)
            res = (a2.T @ gb).reshape(k, lsize, n).transpose(1, 0, 2)
            return res.reshape(lead + (k, n))
    else:
        def vjp_b(g, nl):
            return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape, nl)

    return t._new(out, (a, b), (vjp_a, vjp_b))


def relu(x: Var) -> Var:
    pos = x.value > 0
    return x.tape._new(np.where(pos, x.value, 0.0), (x,), (lambda g, nl: g * pos,))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    take_a = a.value >= b.value
    return t._new(np.where(take_a, a.value, b.value), (a, b),
                  (lambda g, nl: _unbroadcast(g * take_a, a.value.shape, nl),
                   lambda g, nl: _unbroadcast(g * ~take_a, b.value.shape, nl)))


def exp(x: Var) -> Var:
    e = np.exp(x.value)
    return x.tape._new(e, (x,), (lambda g, nl: g * e,))


def log(x: Var) -> Var:
    xv = x.value
    return x.tape._new(np.log(xv), (x,), (lambda g, nl: g / xv,))


def _expand_reduced(g, shape, axis, nl, keepdims):
    if axis is None:
        g = g.reshape(g.shape[:nl] + (1,) * len(shape))
    elif not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, nl + ax)
    return np.broadcast_to(g, g.shape[:nl] + shape)


def sum(x: Var, axis=None, keepdims=False) -> Var:  # noqa: A001
    shape = x.value.shape
    return x.tape._new(x.value.sum(axis=axis, keepdims=keepdims), (x,),
                       (lambda g, nl: _expand_reduced(g, shape, axis, nl, keepdims),))


def mean(x: Var, axis=None, keepdims=False) -> Var:
    count = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis, keepdims), 1.0 / count)


def dot(a, b) -> Var:
    """Inner product of two vectors."""
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    if a.value.shape != b.value.shape or a.value.ndim != 1:
        raise ShapeMismatch(f"dot needs equal 1-D shapes, got {a.value.shape} and {b.value.shape}")
    return sum(mul(a, b))


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.tape._new(x.value.reshape(shape), (x,),
                       (lambda g, nl: g.reshape(g.shape[:nl] + old),))


def transpose(x: Var) -> Var:
    """Swap the last two axes."""
    return x.tape._new(np.swapaxes(x.value, -1, -2), (x,), (lambda g, nl: np.swapaxes(g, -1, -2),))


def expand_dims(x: Var, axis: int) -> Var:
    shape = list(x.value.shape)
    axis = axis % (len(shape) + 1)
    shape.insert(axis, 1)
    return reshape(x, tuple(shape))


def masked_max(x: Var, mask, axis: int) -> Var:
    """Max over ``axis`` restricted to ``mask``; fully masked slices give 0.

    The gradient flows to the first maximizing position.
    """
    xv = x.value
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    axis = axis % xv.ndim
    filled = np.where(mask, xv, -np.inf)
    arg = np.argmax(filled, axis=axis)
    any_ = mask.any(axis=axis)
    out = np.where(any_, np.take_along_axis(filled, np.expand_dims(arg, axis), axis).squeeze(axis), 0.0)
    onehot = np.zeros(xv.shape)
    np.put_along_axis(onehot, np.expand_dims(arg, axis), 1.0, axis)
    onehot *= np.expand_dims(any_, axis)

    def vjp(g, nl):
        return np.expand_dims(g, nl + axis) * onehot

    return x.tape._new(out, (x,), (vjp,))


def edge_max_message(hs: Var, hd: Var, efeat, w_edge: Var, bias: Var, adj) -> Var:
    """Fused ``masked_max(relu(hs[u] + hd[v] + efeat[u, v] @ w_edge + bias), adj, axis=1)``.

    Shapes: hs, hd (B, n, h); efeat (B, n, n, k); w_edge (k, h); bias (h,);
    adj (B, n, n) with adj[b, u, v] marking the edge u -> v. Receivers without
    in-edges get 0. Matches the unfused composition, including first-argmax
    gradient routing, whenever the maximum is positive.
    """
    t = hs.tape
    efeat = np.asarray(efeat, dtype=np.float64)
    B, n, h = hs.value.shape
    k = efeat.shape[-1]
    if hd.value.shape != (B, n, h) or efeat.shape[:3] != (B, n, n) or w_edge.value.shape != (k, h):
        raise ShapeMismatch("edge_max_message operand shapes disagree")
    pre = (efeat.reshape(-1, k) @ w_edge.value).reshape(B, n, n, h)
    pre += hs.value[:, :, None, :]
    pre += hd.value[:, None, :, :]
    pre += bias.value
    np.maximum(pre, 0.0, out=pre)
    pre *= np.asarray(adj, dtype=bool)[..., None]
    arg = pre.argmax(axis=1)  # (B, n_recv, h)
    out = np.take_along_axis(pre, arg[:, None], 1)[:, 0]
    active = out > 0
    bi = np.arange(B)[:, None, None]
    ci = np.arange(h)[None, None, :]
    vi = np.arange(n)[None, :, None]
    ef_sel = efeat[bi, arg, vi]  # (B, n_recv, h, k)
    flat_src = (bi * n + arg) * h + ci  # position of (b, u*, c) in hs

    def gsel(g):
        return g * active

    def vjp_hs(g, nl):
        gs = gsel(g)
        lead = g.shape[:nl]
        L = int(np.prod(lead, dtype=np.int64))
        offs = (np.arange(L) * (B * n * h))[:, None]
        idx = (offs + flat_src.reshape(1, -1)).ravel()
        res = np.bincount(idx, weights=gs.reshape(L, -1).ravel(), minlength=L * B * n * h)
        return res.reshape(lead + (B, n, h))

    def vjp_hd(g, nl):
        return gsel(g)

    def vjp_w(g, nl):
        return np.einsum("...bvc,bvck->...kc", gsel(g), ef_sel)

    def vjp_b(g, nl):
        gs = gsel(g)
        return gs.sum(axis=tuple(range(nl, gs.ndim - 1)))

    return t._new(out, (hs, hd, w_edge, bias), (vjp_hs, vjp_hd, vjp_w, vjp_b))


def masked_logsumexp(x: Var, mask, axis: int = -1) -> Var:
    """log-sum-exp over the masked entries of ``axis``; empty slices give -inf."""
    xv = x.value
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    axis = axis % xv.ndim
    filled = np.where(mask, xv, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(filled - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(s) + m
        w = np.where(s > 0, e / s, 0.0)
    out = out.squeeze(axis)

    def vjp(g, nl):
        return np.expand_dims(g, nl + axis) * w

    return x.tape._new(out, (x,), (vjp,))


def masked_log_softmax(x: Var, mask, axis: int = -1) -> Var:
    """Log-softmax over masked entries; masked-out entries are returned as 0."""
    xv = x.value
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    axis = axis % xv.ndim
    filled = np.where(mask, xv, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(filled - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = np.log(s) + m
        probs = np.where(s > 0, e / s, 0.0)
    out = np.where(mask, xv - lse, 0.0)

    def vjp(g, nl):
        gm = g * mask
        return gm - probs * gm.sum(axis=nl + axis, keepdims=True)

    return x.tape._new(out, (x,), (vjp,))


def take_along(x: Var, idx, axis: int = -1) -> Var:
    """``np.take_along_axis`` with a single index per slice (idx has size 1 on axis)."""
    xv = x.value
    axis = axis % xv.ndim
    idx = np.asarray(idx)
    out = np.take_along_axis(xv, idx, axis)

    def vjp(g, nl):
        full = np.zeros(g.shape[:nl] + xv.shape)
        bidx = np.broadcast_to(idx, g.shape[:nl] + idx.shape)
        np.put_along_axis(full, bidx, g, nl + axis)
        return full

    return x.tape._new(out, (x,), (vjp,))


def gather_rows(x: Var, idx) -> Var:
    """out[b, i] = x[b, idx[b, i]] for x of shape (B, n, ...) and idx (B, m)."""
    xv = x.value
    idx = np.asarray(idx)
    bi = np.arange(xv.shape[0])[:, None]
    out = xv[bi, idx]

    def vjp(g, nl):
        full = np.zeros(g.shape[:nl] + xv.shape)
        np.add.at(full, (slice(None),) * nl + (bi, idx), g)
        return full

    return x.tape._new(out, (x,), (vjp,))


def segment_sum(x: Var, segments, num_segments: int) -> Var:
    """Sum rows of ``x`` (axis 0) into ``num_segments`` buckets in row order."""
    xv = x.value
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != xv.shape[:1]:
        raise ShapeMismatch("one segment id per row is required")
    out = np.zeros((num_segments,) + xv.shape[1:])
    np.add.at(out, seg, xv)

    def vjp(g, nl):
        return np.take(g, seg, axis=nl)

    return x.tape._new(out, (x,), (vjp,))


def softmax(x: Var, axis: int = -1) -> Var:
    return exp(masked_log_softmax(x, np.ones(x.value.shape, dtype=bool), axis))


# --------------------------------------------------------------------------
# functional entry points


def forward_scalar(program, params: ParamStore, inputs=None):
    """Run ``program(tape, inputs)`` and return (scalar value, tape)."""
    tape = Tape(params)
    out = program(tape, inputs)
    if not isinstance(out, Var):
        out = tape.const(out)
    if out.value.size != 1 or out.value.ndim > 1:
        raise ShapeMismatch(f"program output has shape {out.value.shape}, expected a scalar")
    if out.value.ndim == 1:
        out = reshape(out, ())
    tape.output = out
    return float(out.value), tape


def backward(tape: Tape) -> np.ndarray:
    return tape.backward(tape.output)


def grad_suffix(tape: Tape, l: int) -> np.ndarray:
    """Gradient restricted to the parameters of layers ``l`` and above."""
    start = tape.store.suffix_offset(l)
    return backward(tape)[start:]


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, p: int) -> "AdamState":
        return cls(np.zeros(p), np.zeros(p), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              hyper: AdamHyper | None = None, mask=None):
    """One Adam update; returns (new_params, new_state). ``mask`` limits the
    update to selected coordinates."""
    hyper = hyper or AdamHyper()
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatch("params, grads and optimizer state must align")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grads * grads
    mhat = m / (1 - hyper.beta1 ** t)
    vhat = v / (1 - hyper.beta2 ** t)
    step = hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)
    if mask is not None:
        step = np.where(mask, step, 0.0)
    return params - step, AdamState(m, v, t)
