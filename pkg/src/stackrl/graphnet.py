"""Goal-conditioned policy/critic networks over the full 5-block graph.

Five interchangeable bodies:

- "GN": full graph network: shared edge update on every directed pair,
  pooled incoming messages feed a shared node update, pooled nodes feed a
  readout MLP.  The global feature U (gripper state, plus the action for
  critics) conditions every stage.
- "IN": as GN but U is withheld from the edge update.
- "RN": edge updates only; pooled edge outputs go straight to readout.
- "DS": node updates only; each node sees its pooled incident raw edge
  features (both directions).
- "FLAT": one deep MLP over the concatenated observation and goal.

Shared update nets have one hidden layer and output three times their
input width.  Aggregation is one-headed self-attention,
score(v) = w^T tanh(W v), softmax within each pool group; a plain-sum
variant supports the aggregation ablation.  Every non-GN body is sized to
match the GN parameter count within 5 percent: RN and DS gain a second,
stacked update net whose hidden width is solved for the deficit, IN's
shared hidden width is solved linearly, and FLAT's three hidden layers
are solved from a quadratic.

Goals enter through edge features: a semantic goal contributes
[close(i, j), above(i, j), above(j, i)] on the edge i -> j, a continuous
goal contributes the 3-D target of the source block.  FLAT instead sees
the goal vector verbatim.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .goalspace import ABOVE_PAIRS, CLOSE_INDEX, N_OBJECTS
from .numcore import (ContractError, ParamStore, Var, add, concat_cols,
                      gather_rows, init_mlp, matmul, mlp_forward, mul, pvar,
                      relu, segment_softmax, segment_sum, tanh, vstack_rows,
                      xavier_init)

KINDS = ("GN", "IN", "RN", "DS", "FLAT")
N_EDGES = len(ABOVE_PAIRS)                       # 20 directed pairs

EDGE_SRC = np.array([i for i, j in ABOVE_PAIRS])
EDGE_RCP = np.array([j for i, j in ABOVE_PAIRS])

# columns of the 30-bit goal feeding edge (i, j): close(i,j), above(i,j),
# above(j,i)
_ABOVE_INDEX = {pair: k for k, pair in enumerate(ABOVE_PAIRS)}
SEM_EDGE_COLS = np.array([
    [CLOSE_INDEX[tuple(sorted((i, j)))],
     10 + _ABOVE_INDEX[(i, j)],
     10 + _ABOVE_INDEX[(j, i)]]
    for i, j in ABOVE_PAIRS])

BODY_DIM = 8
NODE_FEAT = 9
EDGE_FEAT = 3
ACTION_DIM = 4

CAPACITY_TOL = 0.05


class CapacityMatchError(ContractError):
    """A body cannot be sized within tolerance of the reference count."""


# ---------------------------------------------------------------------------
# architecture planning


@dataclass(frozen=True)
class NetDims:
    """Feature widths seen by a network."""
    node_feat: int = NODE_FEAT
    edge_feat: int = EDGE_FEAT
    u_feat: int = BODY_DIM
    goal_flat: int = 30
    out_dim: int = 2 * ACTION_DIM


def _mlp_count(n_in, hidden, n_out):
    return hidden * (n_in + 1) + n_out * (hidden + 1)


def _att_count(d):
    return d * d + d


@dataclass(frozen=True)
class Architecture:
    kind: str
    dims: NetDims
    hidden: int
    readout_hidden: int
    attention: bool
    mp_in: int = 0
    mp_out: int = 0
    mp2_in: int = 0
    mp2_out: int = 0
    mp2_hidden: int = 0
    node_in: int = 0
    node_out: int = 0
    node2_in: int = 0
    node2_out: int = 0
    node2_hidden: int = 0
    readout_in: int = 0
    flat_in: int = 0
    flat_width: int = 0
    target_count: int = 0

    def expected_count(self) -> int:
        d = self.dims
        total = 0
        if self.kind == "FLAT":
            w = self.flat_width
            return (w * (self.flat_in + 1) + 2 * w * (w + 1)
                    + d.out_dim * (w + 1))
        if self.kind in ("GN", "IN", "RN"):
            total += _mlp_count(self.mp_in, self.hidden, self.mp_out)
            if self.attention:
                total += _att_count(self.mp_out)
        if self.kind == "RN" and self.mp2_hidden:
            total += _mlp_count(self.mp2_in, self.mp2_hidden, self.mp2_out)
        if self.kind in ("GN", "IN", "DS"):
            total += _mlp_count(self.node_in, self.hidden, self.node_out)
            if self.attention:
                total += _att_count(self.node_out)
        if self.kind == "DS":
            if self.attention:
                total += _att_count(d.edge_feat)
            if self.node2_hidden:
                total += _mlp_count(self.node2_in, self.node2_hidden,
                                    self.node2_out)
        total += _mlp_count(self.readout_in, self.readout_hidden, d.out_dim)
        return total


def _gn_dims(dims: NetDims):
    mp_in = dims.edge_feat + 2 * dims.node_feat + dims.u_feat
    mp_out = 3 * mp_in
    node_in = dims.node_feat + dims.u_feat + mp_out
    node_out = 3 * node_in
    return mp_in, mp_out, node_in, node_out


def reference_count(dims: NetDims, hidden: int, readout_hidden: int,
                    attention: bool) -> int:
    """Parameter count of the GN body: the sizing target for the rest."""
    mp_in, mp_out, node_in, node_out = _gn_dims(dims)
    total = _mlp_count(mp_in, hidden, mp_out)
    total += _mlp_count(node_in, hidden, node_out)
    total += _mlp_count(node_out + dims.u_feat, readout_hidden, dims.out_dim)
    if attention:
        total += _att_count(mp_out) + _att_count(node_out)
    return total


def plan_architecture(kind: str, dims: NetDims, hidden: int = 256,
                      readout_hidden: int = 256, attention: bool = True,
                      equalize: bool = True) -> Architecture:
    """Resolve every width for a body, sizing non-GN bodies to the GN
    parameter count when equalize is set."""
    if kind not in KINDS:
        raise ContractError(f"unknown body kind {kind!r}")
    target = reference_count(dims, hidden, readout_hidden, attention)
    base = dict(kind=kind, dims=dims, hidden=hidden,
                readout_hidden=readout_hidden, attention=attention,
                target_count=target)
    mp_in, mp_out, node_in, node_out = _gn_dims(dims)

    if kind == "GN":
        arch = Architecture(**base, mp_in=mp_in, mp_out=mp_out,
                            node_in=node_in, node_out=node_out,
                            readout_in=node_out + dims.u_feat)

    elif kind == "IN":
        mp_in_ = dims.edge_feat + 2 * dims.node_feat
        mp_out_ = 3 * mp_in_
        node_in_ = dims.node_feat + dims.u_feat + mp_out_
        node_out_ = 3 * node_in_
        readout_in = node_out_ + dims.u_feat
        h = hidden
        if equalize:
            fixed = _mlp_count(readout_in, readout_hidden, dims.out_dim)
            if attention:
                fixed += _att_count(mp_out_) + _att_count(node_out_)
            fixed += mp_out_ + node_out_         # output-bias terms
            coeff = (mp_in_ + mp_out_ + 1) + (node_in_ + node_out_ + 1)
            h = max(1, round((target - fixed) / coeff))
        arch = Architecture(**{**base, "hidden": h}, mp_in=mp_in_,
                            mp_out=mp_out_, node_in=node_in_,
                            node_out=node_out_, readout_in=readout_in)

    elif kind == "RN":
        readout_in = mp_out + dims.u_feat
        mp2_in = mp_out + 2 * dims.node_feat + dims.u_feat
        h2 = 0
        if equalize:
            have = _mlp_count(mp_in, hidden, mp_out)
            have += _mlp_count(readout_in, readout_hidden, dims.out_dim)
            if attention:
                have += _att_count(mp_out)
            h2 = max(1, round((target - have - mp_out)
                              / (mp2_in + mp_out + 1)))
        arch = Architecture(**base, mp_in=mp_in, mp_out=mp_out,
                            mp2_in=mp2_in, mp2_out=mp_out, mp2_hidden=h2,
                            readout_in=readout_in)

    elif kind == "DS":
        node_in_ = dims.node_feat + dims.edge_feat + dims.u_feat
        node_out_ = 3 * node_in_
        readout_in = node_out_ + dims.u_feat
        node2_in = node_out_ + dims.edge_feat + dims.u_feat
        h2 = 0
        if equalize:
            have = _mlp_count(node_in_, hidden, node_out_)
            have += _mlp_count(readout_in, readout_hidden, dims.out_dim)
            if attention:
                have += _att_count(dims.edge_feat) + _att_count(node_out_)
            h2 = max(1, round((target - have - node_out_)
                              / (node2_in + node_out_ + 1)))
        arch = Architecture(**base, node_in=node_in_, node_out=node_out_,
                            node2_in=node2_in, node2_out=node_out_,
                            node2_hidden=h2, readout_in=readout_in)

    else:  # FLAT
        flat_in = dims.u_feat + N_OBJECTS * dims.node_feat + dims.goal_flat
        b = flat_in + 3 + dims.out_dim
        w = max(1, round((-b + np.sqrt(b * b + 8 * (target - dims.out_dim)))
                         / 4))
        arch = Architecture(**base, flat_in=flat_in, flat_width=w)

    if equalize or kind == "GN":
        got = arch.expected_count()
        if abs(got - target) / target > CAPACITY_TOL:
            raise CapacityMatchError(
                f"{kind}: {got} parameters vs target {target}")
    return arch


def build_params(arch: Architecture, rng) -> ParamStore:
    """Materialise a fresh parameter store for a planned body."""
    store = ParamStore()
    d = arch.dims
    if arch.kind == "FLAT":
        w = arch.flat_width
        init_mlp(store, "flat_a", arch.flat_in, w, w, rng)
        store.add("flat_b/W", xavier_init((w, w), rng))
        store.add("flat_b/b", np.zeros((1, w)))
        store.add("flat_out/W", xavier_init((w, d.out_dim), rng))
        store.add("flat_out/b", np.zeros((1, d.out_dim)))
        return store
    if arch.kind in ("GN", "IN", "RN"):
        init_mlp(store, "mp", arch.mp_in, arch.hidden, arch.mp_out, rng)
        if arch.attention:
            store.add("att_edge/W", xavier_init((arch.mp_out, arch.mp_out), rng))
            store.add("att_edge/w", xavier_init((arch.mp_out, 1), rng))
    if arch.kind == "RN" and arch.mp2_hidden:
        init_mlp(store, "mp2", arch.mp2_in, arch.mp2_hidden, arch.mp2_out, rng)
    if arch.kind in ("GN", "IN", "DS"):
        init_mlp(store, "node", arch.node_in, arch.hidden, arch.node_out, rng)
        if arch.attention:
            store.add("att_node/W", xavier_init((arch.node_out, arch.node_out), rng))
            store.add("att_node/w", xavier_init((arch.node_out, 1), rng))
    if arch.kind == "DS":
        if arch.attention:
            store.add("att_inc/W", xavier_init((d.edge_feat, d.edge_feat), rng))
            store.add("att_inc/w", xavier_init((d.edge_feat, 1), rng))
        if arch.node2_hidden:
            init_mlp(store, "node2", arch.node2_in, arch.node2_hidden,
                     arch.node2_out, rng)
    init_mlp(store, "readout", arch.readout_in, arch.readout_hidden,
             d.out_dim, rng)
    expected = arch.expected_count()
    if store.n_parameters() != expected:
        raise CapacityMatchError(
            f"{arch.kind}: built {store.n_parameters()} != planned {expected}")
    return store


def count_parameters(store: ParamStore) -> int:
    return store.n_parameters()


# ---------------------------------------------------------------------------
# batched graph assembly


@lru_cache(maxsize=128)
def _batch_indices(B: int):
    off = (np.arange(B) * N_OBJECTS)[:, None]
    src = (EDGE_SRC[None, :] + off).ravel()
    rcp = (EDGE_RCP[None, :] + off).ravel()
    edge_graph = np.repeat(np.arange(B), N_EDGES)
    node_graph = np.repeat(np.arange(B), N_OBJECTS)
    return src, rcp, edge_graph, node_graph


class GraphBatch:
    """B scenes stacked into flat node/edge/global arrays."""

    __slots__ = ("B", "nodes", "edges", "u", "goal_flat")

    def __init__(self, nodes, edges, u, goal_flat, B):
        self.B = B
        self.nodes = nodes
        self.edges = edges
        self.u = u
        self.goal_flat = goal_flat


def build_batch(bodies, objects, goals, actions=None) -> GraphBatch:
    """Assemble network inputs.

    bodies (B, 8), objects (B, 5, 9); goals either (B, 30) semantic bits
    or (B, 15) flattened per-object targets; actions (B, 4) appended to
    the global feature for critics.
    """
    bodies = np.asarray(bodies, dtype=np.float64)
    objects = np.asarray(objects, dtype=np.float64)
    goals = np.asarray(goals, dtype=np.float64)
    B = bodies.shape[0]
    if bodies.shape != (B, BODY_DIM) or objects.shape != (B, N_OBJECTS, NODE_FEAT):
        raise ContractError("bad observation shapes")
    nodes = objects.reshape(B * N_OBJECTS, NODE_FEAT)
    if goals.shape[1] == 30:
        edges = goals[:, SEM_EDGE_COLS].reshape(B * N_EDGES, EDGE_FEAT)
    elif goals.shape[1] == N_OBJECTS * 3:
        targets = goals.reshape(B, N_OBJECTS, 3)
        edges = targets[:, EDGE_SRC].reshape(B * N_EDGES, EDGE_FEAT)
    else:
        raise ContractError(f"bad goal width {goals.shape[1]}")
    u = bodies
    if actions is not None:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (B, ACTION_DIM):
            raise ContractError("bad action shape")
        u = np.concatenate([bodies, actions], axis=1)
    return GraphBatch(nodes, edges, u, goals, B)


# ---------------------------------------------------------------------------
# forward passes


def _pool(store, prefix, x, seg, n_seg, attention, tape, trainable):
    if not attention:
        return segment_sum(x, seg, n_seg)
    W = pvar(store[f"{prefix}/W"], tape, trainable)
    w = pvar(store[f"{prefix}/w"], tape, trainable)
    scores = matmul(tanh(matmul(x, W)), w)
    alpha = segment_softmax(scores, seg, n_seg)
    return segment_sum(mul(x, alpha), seg, n_seg)


def forward(store: ParamStore, arch: Architecture, batch: GraphBatch,
            tape=None, trainable=True, u_var: Var | None = None) -> Var:
    """Batched forward pass returning a (B, out_dim) Var.

    u_var optionally replaces the stored global feature with a tracked
    variable, letting gradients flow into the action columns while the
    body parameters stay constant (trainable=False).
    """
    B = batch.B
    src, rcp, e_graph, n_graph = _batch_indices(B)
    u = u_var if u_var is not None else Var(batch.u)
    if arch.kind == "FLAT":
        rest = Var(np.concatenate(
            [batch.nodes.reshape(B, -1), batch.goal_flat], axis=1))
        x = concat_cols(u, rest)
        h = relu(mlp_forward(store, "flat_a", x, tape=tape,
                             trainable=trainable))
        h = relu(add(matmul(h, pvar(store["flat_b/W"], tape, trainable)),
                     pvar(store["flat_b/b"], tape, trainable)))
        return add(matmul(h, pvar(store["flat_out/W"], tape, trainable)),
                   pvar(store["flat_out/b"], tape, trainable))

    nodes = Var(batch.nodes)
    edges = Var(batch.edges)
    u_e = gather_rows(u, e_graph)
    u_n = gather_rows(u, n_graph)
    x_src = gather_rows(nodes, src)
    x_rcp = gather_rows(nodes, rcp)

    if arch.kind in ("GN", "IN", "RN"):
        parts = [edges, x_src, x_rcp]
        if arch.kind != "IN":
            parts.append(u_e)
        e1 = mlp_forward(store, "mp", concat_cols(*parts),
                         tape=tape, trainable=trainable)
        if arch.kind == "RN":
            if arch.mp2_hidden:
                e1 = mlp_forward(store, "mp2",
                                 concat_cols(e1, x_src, x_rcp, u_e),
                                 tape=tape, trainable=trainable)
            pooled = _pool(store, "att_edge", e1, e_graph, B,
                           arch.attention, tape, trainable)
            return mlp_forward(store, "readout", concat_cols(pooled, u),
                               tape=tape, trainable=trainable)
        msg = _pool(store, "att_edge", e1, rcp, B * N_OBJECTS,
                    arch.attention, tape, trainable)
        x1 = mlp_forward(store, "node", concat_cols(nodes, u_n, msg),
                         tape=tape, trainable=trainable)
    else:  # DS: pool raw incident edges (both directions) per node
        both = vstack_rows(edges, edges)
        seg = np.concatenate([src, rcp])
        pooled_inc = _pool(store, "att_inc", both, seg, B * N_OBJECTS,
                           arch.attention, tape, trainable)
        x1 = mlp_forward(store, "node", concat_cols(nodes, pooled_inc, u_n),
                         tape=tape, trainable=trainable)
        if arch.node2_hidden:
            x1 = mlp_forward(store, "node2",
                             concat_cols(x1, pooled_inc, u_n),
                             tape=tape, trainable=trainable)

    pooled = _pool(store, "att_node", x1, n_graph, B,
                   arch.attention, tape, trainable)
    return mlp_forward(store, "readout", concat_cols(pooled, u),
                       tape=tape, trainable=trainable)
