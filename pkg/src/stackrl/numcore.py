"""Dense matrices with reverse-mode automatic differentiation.

Values are 2-D float64 numpy arrays wrapped in :class:`Var` nodes.  Every
operation appends a record to an explicit :class:`Tape`; calling
``Tape.backward`` on a scalar root walks the records once in reverse and
accumulates adjoints.  The tape is rebuilt for every forward pass, there is
no retained graph.

Also provides the parameter store used by all networks, Xavier
initialisation, a one-hidden-layer MLP forward, and Adam.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was used outside its contract (e.g. non-scalar root)."""


class PoisonedUpdateError(RuntimeError):
    """A gradient contained NaN/Inf; the optimizer update was aborted."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2-D value, got shape {a.shape}")
    return a


class Var:
    """A matrix value, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "adj")

    def __init__(self, value, tape=None):
        self.value = _as_array(value)
        self.tape = tape
        self.adj = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, tracked={self.tape is not None})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class Tape:
    """Wengert list.  Records ops in execution order; backward replays them
    reversed exactly once.  Parameter leaves are deduplicated so gradients
    for a parameter used several times accumulate in one slot."""

    def __init__(self):
        self._records = []          # (out, parents, backward_fn)
        self._leaves = []           # tracked input Vars
        self._param_leaves = {}     # id(Param) -> (Param, Var)

    def leaf(self, value) -> Var:
        v = Var(value, tape=self)
        self._leaves.append(v)
        return v

    def param(self, p: "Param") -> Var:
        hit = self._param_leaves.get(id(p))
        if hit is not None:
            return hit[1]
        v = self.leaf(p.value)
        self._param_leaves[id(p)] = (p, v)
        return v

    def record(self, out: Var, parents, backward_fn):
        out.tape = self
        self._records.append((out, parents, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, root: Var, seed: float = 1.0):
        """Accumulate d(root)/d(leaf) into every leaf's ``adj`` and copy
        parameter adjoints into their ``grad`` slots.  Running this twice
        on the same tape gives identical results."""
        if root.tape is not self:
            raise ContractError("root does not belong to this tape")
        if root.value.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        for out, _, _ in self._records:
            out.adj = np.zeros_like(out.value)
        for v in self._leaves:
            v.adj = np.zeros_like(v.value)
        root.adj = root.adj + float(seed)
        for out, parents, backward_fn in reversed(self._records):
            backward_fn(out.adj)
        for p, v in self._param_leaves.values():
            p.grad[...] = v.adj


def _tape_of(*vs) -> Tape | None:
    t = None
    for v in vs:
        if v.tape is not None:
            if t is None:
                t = v.tape
            elif t is not v.tape:
                raise ContractError("operands live on different tapes")
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _binary(a, b, fwd, bwd_a, bwd_b):
    a, b = as_var(a), as_var(b)
    t = _tape_of(a, b)
    out = Var(fwd(a.value, b.value))
    if t is not None:
        def backward(g):
            if a.tape is not None:
                a.adj += _unbroadcast(bwd_a(g, a.value, b.value), a.value.shape)
            if b.tape is not None:
                b.adj += _unbroadcast(bwd_b(g, a.value, b.value), b.value.shape)
        t.record(out, (a, b), backward)
    return out


def _unary(a, fwd, bwd):
    a = as_var(a)
    t = a.tape
    out = Var(fwd(a.value))
    if t is not None:
        def backward(g):
            a.adj += bwd(g, a.value, out.value)
        t.record(out, (a,), backward)
    return out


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul {a.value.shape} @ {b.value.shape}")
    t = _tape_of(a, b)
    out = Var(a.value @ b.value)
    if t is not None:
        def backward(g):
            if a.tape is not None:
                a.adj += g @ b.value.T
            if b.tape is not None:
                b.adj += a.value.T @ g
        t.record(out, (a, b), backward)
    return out


def add(a, b) -> Var:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Var:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Var:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Var:
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a) -> Var:
    return _unary(a, lambda x: -x, lambda g, x, y: -g)


def relu(a) -> Var:
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0.0))


def tanh(a) -> Var:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def exp(a) -> Var:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Var:
    return _unary(a, np.log, lambda g, x, y: g / x)


def softplus(a) -> Var:
    # log(1 + e^x), computed stably.
    def fwd(x):
        return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

    def bwd(g, x, y):
        return g * _sigmoid(x)

    return _unary(a, fwd, bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp(a, lo: float, hi: float) -> Var:
    return _unary(a, lambda x: np.clip(x, lo, hi),
                  lambda g, x, y: g * ((x >= lo) & (x <= hi)))


def minimum(a, b) -> Var:
    # Ties route the gradient to the first argument.
    return _binary(a, b, np.minimum,
                   lambda g, x, y: g * (x <= y),
                   lambda g, x, y: g * (x > y))


def concat_cols(*parts) -> Var:
    if len(parts) == 1 and isinstance(parts[0], (list, tuple)):
        parts = parts[0]
    parts = [as_var(p) for p in parts]
    t = _tape_of(*parts)
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {sorted(rows)}")
    out = Var(np.concatenate([p.value for p in parts], axis=1))
    if t is not None:
        widths = [p.value.shape[1] for p in parts]
        offsets = np.cumsum([0] + widths)

        def backward(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.tape is not None:
                    p.adj += g[:, lo:hi]
        t.record(out, tuple(parts), backward)
    return out


def vstack_rows(a, b) -> Var:
    """Stack two matrices of equal width vertically."""
    a, b = as_var(a), as_var(b)
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeError("vstack_rows column mismatch")
    t = _tape_of(a, b)
    out = Var(np.concatenate([a.value, b.value], axis=0))
    if t is not None:
        n = a.value.shape[0]

        def backward(g):
            if a.tape is not None:
                a.adj += g[:n]
            if b.tape is not None:
                b.adj += g[n:]
        t.record(out, (a, b), backward)
    return out


def slice_cols(a, start: int, stop: int) -> Var:
    """Contiguous column slice a[:, start:stop]."""
    a = as_var(a)
    if not (0 <= start < stop <= a.value.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range "
                         f"for width {a.value.shape[1]}")
    t = a.tape
    out = Var(a.value[:, start:stop])
    if t is not None:
        def backward(g):
            a.adj[:, start:stop] += g
        t.record(out, (a,), backward)
    return out


def gather_rows(a, idx) -> Var:
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.intp)
    t = a.tape
    out = Var(a.value[idx])
    if t is not None:
        def backward(g):
            np.add.at(a.adj, idx, g)
        t.record(out, (a,), backward)
    return out


def segment_sum(a, seg, n_segments: int) -> Var:
    """Sum rows of ``a`` into ``n_segments`` buckets given per-row ids."""
    a = as_var(a)
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape[0] != a.value.shape[0]:
        raise ShapeError("segment ids must match row count")
    t = a.tape
    res = np.zeros((n_segments, a.value.shape[1]))
    np.add.at(res, seg, a.value)
    out = Var(res)
    if t is not None:
        def backward(g):
            a.adj += g[seg]
        t.record(out, (a,), backward)
    return out


def segment_max(values: np.ndarray, seg: np.ndarray, n_segments: int) -> np.ndarray:
    """Plain (non-differentiated) per-segment max, used to stabilise softmax."""
    res = np.full((n_segments, values.shape[1]), -np.inf)
    np.maximum.at(res, np.asarray(seg, dtype=np.intp), values)
    return res


def segment_softmax(scores, seg, n_segments: int) -> Var:
    """Softmax within each segment.  ``scores`` must be a column vector."""
    scores = as_var(scores)
    if scores.value.shape[1] != 1:
        raise ShapeError("segment_softmax expects a column of scores")
    seg = np.asarray(seg, dtype=np.intp)
    m = segment_max(scores.value, seg, n_segments)
    z = exp(sub(scores, Var(m[seg])))
    totals = segment_sum(z, seg, n_segments)
    return div(z, gather_rows(totals, seg))


def sum_cols(a) -> Var:
    a = as_var(a)
    t = a.tape
    out = Var(a.value.sum(axis=1, keepdims=True))
    if t is not None:
        def backward(g):
            a.adj += g  # broadcasts (R,1) across columns
        t.record(out, (a,), backward)
    return out


def sum_all(a) -> Var:
    a = as_var(a)
    t = a.tape
    out = Var(np.array([[a.value.sum()]]))
    if t is not None:
        def backward(g):
            a.adj += g[0, 0]
        t.record(out, (a,), backward)
    return out


def mean_all(a) -> Var:
    a = as_var(a)
    return mul(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# parameters


class Param:
    """A learnable array with a persistent gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = _as_array(np.array(value, dtype=np.float64, copy=True))
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Ordered name -> Param mapping with npz (de)serialisation."""

    FORMAT_VERSION = 1

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        p = Param(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grads(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self._params.items():
            other.add(name, p.value)
        return other

    def load_values(self, other: "ParamStore"):
        if self.names() != other.names():
            raise ContractError("parameter name sets differ")
        for name, p in self._params.items():
            if p.value.shape != other[name].value.shape:
                raise ShapeError(f"shape mismatch for {name!r}")
            p.value[...] = other[name].value

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: p.value.copy() for name, p in self._params.items()}

    def save(self, path, meta: dict | None = None):
        arrays = self.state_arrays()
        header = {"format_version": self.FORMAT_VERSION,
                  "names": self.names(),
                  "meta": meta or {}}
        arrays["__header__"] = np.frombuffer(
            json.dumps(header).encode("utf-8"), dtype=np.uint8)
        np.savez(path, **arrays)

    @staticmethod
    def load(path) -> tuple["ParamStore", dict]:
        with np.load(path) as data:
            header = json.loads(bytes(data["__header__"]).decode("utf-8"))
            if header.get("format_version") != ParamStore.FORMAT_VERSION:
                raise ContractError(
                    f"unsupported checkpoint version {header.get('format_version')}")
            store = ParamStore()
            for name in header["names"]:
                store.add(name, data[name])
        return store, header.get("meta", {})


def xavier_init(shape, rng) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "none": lambda v: v}


def init_mlp(store: ParamStore, prefix: str, n_in: int, n_hidden: int,
             n_out: int, rng) -> None:
    store.add(f"{prefix}/W1", xavier_init((n_in, n_hidden), rng))
    store.add(f"{prefix}/b1", np.zeros((1, n_hidden)))
    store.add(f"{prefix}/W2", xavier_init((n_hidden, n_out), rng))
    store.add(f"{prefix}/b2", np.zeros((1, n_out)))


def pvar(p: Param, tape: Tape | None, trainable: bool = True) -> Var:
    """Expose a parameter to a computation: tracked leaf when training,
    plain constant otherwise (values still flow, gradients do not)."""
    if tape is not None and trainable:
        return tape.param(p)
    return Var(p.value)


def mlp_forward(store: ParamStore, prefix: str, x, activation: str = "relu",
                tape: Tape | None = None, trainable: bool = True) -> Var:
    """One-hidden-layer MLP: W2 . act(W1 . x + b1) + b2, linear output."""
    act = _ACTIVATIONS[activation]
    h = add(matmul(x, pvar(store[f"{prefix}/W1"], tape, trainable)),
            pvar(store[f"{prefix}/b1"], tape, trainable))
    h = act(h)
    return add(matmul(h, pvar(store[f"{prefix}/W2"], tape, trainable)),
               pvar(store[f"{prefix}/b2"], tape, trainable))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @staticmethod
    def for_store(store: ParamStore) -> "AdamState":
        s = AdamState()
        for name, p in store.items():
            s.m[name] = np.zeros_like(p.value)
            s.v[name] = np.zeros_like(p.value)
        return s


def adam_step(params: ParamStore, grads, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update.  ``grads`` maps name -> array; ``None`` uses the
    stores' own grad slots.  Any non-finite gradient aborts the whole update
    before any state is touched."""
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise PoisonedUpdateError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)


class Adam:
    """Convenience wrapper binding a store to its Adam state."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.for_store(store)

    def step(self, grads=None):
        adam_step(self.store, grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name in self.store.names():
            out[f"{prefix}m/{name}"] = self.state.m[name].copy()
            out[f"{prefix}v/{name}"] = self.state.v[name].copy()
        out[f"{prefix}t"] = np.array([self.state.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays, prefix: str = ""):
        for name in self.store.names():
            self.state.m[name][...] = arrays[f"{prefix}m/{name}"]
            self.state.v[name][...] = arrays[f"{prefix}v/{name}"]
        self.state.t = int(arrays[f"{prefix}t"][0])
