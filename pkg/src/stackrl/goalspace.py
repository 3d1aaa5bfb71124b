"""Semantic predicates, goal representations, evaluation classes.

A semantic configuration is a 30-bit vector over 5 objects: 10 ``close``
bits (unordered pairs, lexicographic order) followed by 20 ``above`` bits
(ordered pairs, lexicographic order).  ``above`` means *directly* above.

Physical scale constants live here because every predicate threshold is
defined relative to them; the simulator imports them from this module.
"""
from __future__ import annotations

import json
from itertools import combinations, permutations

import numpy as np

from .numcore import ContractError, ShapeError

N_OBJECTS = 5
BLOCK_SIZE = 0.05
TABLE_Z = 0.4
WORKSPACE_X = (-0.25, 0.25)   # 0.5 m
WORKSPACE_Y = (-0.35, 0.35)   # 0.7 m

D_CLOSE = 2.5 * BLOCK_SIZE    # 0.125
EPS_Z = 0.01
EPS_XY = 0.025
EPS_POS = 0.05                # continuous-goal tolerance
# comparisons use "< threshold + slack" so exact-arithmetic boundary scenes
# (a pyramid top sits exactly half a block from each base) are deterministic
GEOM_SLACK = 1e-9

CLOSE_PAIRS = tuple(combinations(range(N_OBJECTS), 2))       # 10
ABOVE_PAIRS = tuple(permutations(range(N_OBJECTS), 2))       # 20
N_BITS = len(CLOSE_PAIRS) + len(ABOVE_PAIRS)                 # 30

CLOSE_INDEX = {pair: k for k, pair in enumerate(CLOSE_PAIRS)}
ABOVE_INDEX = {pair: len(CLOSE_PAIRS) + k for k, pair in enumerate(ABOVE_PAIRS)}

# bit indices involving each object (4 close + 8 above = 12 each)
OBJECT_BIT_INDICES = tuple(
    tuple(sorted([CLOSE_INDEX[p] for p in CLOSE_PAIRS if i in p]
                 + [ABOVE_INDEX[p] for p in ABOVE_PAIRS if i in p]))
    for i in range(N_OBJECTS))

_OBJECT_BIT_MASK = np.zeros((N_OBJECTS, N_BITS), dtype=bool)
for _i in range(N_OBJECTS):
    _OBJECT_BIT_MASK[_i, list(OBJECT_BIT_INDICES[_i])] = True


class SemanticConfiguration:
    """Immutable, hashable 30-bit predicate vector."""

    __slots__ = ("bits", "_array")

    def __init__(self, bits):
        bits = tuple(int(b) for b in bits)
        if len(bits) != N_BITS or any(b not in (0, 1) for b in bits):
            raise ShapeError(f"expected {N_BITS} binary entries")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "_array", None)

    def __setattr__(self, *a):
        raise AttributeError("SemanticConfiguration is immutable")

    @classmethod
    def zeros(cls) -> "SemanticConfiguration":
        return cls((0,) * N_BITS)

    @classmethod
    def from_predicates(cls, close=(), above=()) -> "SemanticConfiguration":
        bits = [0] * N_BITS
        for i, j in close:
            bits[CLOSE_INDEX[(min(i, j), max(i, j))]] = 1
        for i, j in above:
            bits[ABOVE_INDEX[(i, j)]] = 1
        return cls(bits)

    @classmethod
    def from_array(cls, arr) -> "SemanticConfiguration":
        return cls(np.asarray(arr).astype(int).ravel().tolist())

    def close(self, i: int, j: int) -> bool:
        return bool(self.bits[CLOSE_INDEX[(min(i, j), max(i, j))]])

    def above(self, i: int, j: int) -> bool:
        return bool(self.bits[ABOVE_INDEX[(i, j)]])

    def as_array(self) -> np.ndarray:
        if self._array is None:
            arr = np.array(self.bits, dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, "_array", arr)
        return self._array

    def to_hex(self) -> str:
        value = 0
        for k, b in enumerate(self.bits):
            value |= b << k
        return f"{value:08x}"

    @classmethod
    def from_hex(cls, text: str) -> "SemanticConfiguration":
        value = int(text, 16)
        return cls(tuple((value >> k) & 1 for k in range(N_BITS)))

    def __eq__(self, other):
        return isinstance(other, SemanticConfiguration) and self.bits == other.bits

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        close = [p for p in CLOSE_PAIRS if self.close(*p)]
        above = [p for p in ABOVE_PAIRS if self.above(*p)]
        return f"SemanticConfiguration(close={close}, above={above})"


def permute_configuration(config: SemanticConfiguration, sigma) -> SemanticConfiguration:
    """Relabel objects: object i becomes sigma[i]."""
    close = [(sigma[i], sigma[j]) for i, j in CLOSE_PAIRS if config.close(i, j)]
    above = [(sigma[i], sigma[j]) for i, j in ABOVE_PAIRS if config.above(i, j)]
    return SemanticConfiguration.from_predicates(close, above)


class ContinuousGoal:
    """Per-object 3-D target positions."""

    __slots__ = ("targets",)

    def __init__(self, targets):
        targets = np.array(targets, dtype=np.float64)
        if targets.shape != (N_OBJECTS, 3):
            raise ShapeError(f"expected ({N_OBJECTS}, 3) targets")
        lo_z = TABLE_Z + BLOCK_SIZE / 2 - GEOM_SLACK
        if np.any(targets[:, 2] < lo_z):
            raise ContractError("target below table surface")
        if (np.any(targets[:, 0] < WORKSPACE_X[0]) or np.any(targets[:, 0] > WORKSPACE_X[1])
                or np.any(targets[:, 1] < WORKSPACE_Y[0]) or np.any(targets[:, 1] > WORKSPACE_Y[1])):
            raise ContractError("target outside workspace")
        targets.setflags(write=False)
        object.__setattr__(self, "targets", targets)

    def __setattr__(self, *a):
        raise AttributeError("ContinuousGoal is immutable")

    def as_array(self) -> np.ndarray:
        return self.targets.reshape(-1)

    def __repr__(self):
        return f"ContinuousGoal({self.targets.tolist()})"


# ---------------------------------------------------------------------------
# predicates


def eval_predicates(positions) -> SemanticConfiguration:
    """Evaluate close/above over 5 object positions (5, 3)."""
    return SemanticConfiguration.from_array(
        eval_predicates_batch(np.asarray(positions, dtype=np.float64)[None])[0])


def eval_predicates_batch(positions: np.ndarray) -> np.ndarray:
    """Vectorized predicate evaluation: (B, 5, 3) -> (B, 30) uint8."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[-2:] != (N_OBJECTS, 3):
        raise ShapeError(f"expected (..., {N_OBJECTS}, 3) positions")
    squeeze = pos.ndim == 2
    if squeeze:
        pos = pos[None]
    diff = pos[:, :, None, :] - pos[:, None, :, :]        # (B, 5, 5, 3)
    dist = np.linalg.norm(diff, axis=-1)
    xy = np.linalg.norm(diff[..., :2], axis=-1)
    dz = diff[..., 2]
    close = dist < D_CLOSE + GEOM_SLACK
    above = (np.abs(dz - BLOCK_SIZE) < EPS_Z + GEOM_SLACK) & (xy < EPS_XY + GEOM_SLACK)
    out = np.zeros((pos.shape[0], N_BITS), dtype=np.uint8)
    for k, (i, j) in enumerate(CLOSE_PAIRS):
        out[:, k] = close[:, i, j]
    for k, (i, j) in enumerate(ABOVE_PAIRS):
        out[:, len(CLOSE_PAIRS) + k] = above[:, i, j]
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# rewards


def semantic_reward(achieved: SemanticConfiguration, goal: SemanticConfiguration):
    """Per-object success, object count reward, full-match success flag."""
    per_object = tuple(
        all(achieved.bits[b] == goal.bits[b] for b in OBJECT_BIT_INDICES[i])
        for i in range(N_OBJECTS))
    reward = sum(per_object)
    return per_object, reward, achieved.bits == goal.bits


def batch_semantic_rewards(achieved: np.ndarray, goals: np.ndarray):
    """(B, 30) x (B, 30) -> per-object (B, 5) bool, rewards (B,), success (B,)."""
    mismatch = (np.asarray(achieved) != np.asarray(goals))   # (B, 30)
    violated = mismatch @ _OBJECT_BIT_MASK.T.astype(np.float64)  # (B, 5)
    per_object = violated == 0
    return per_object, per_object.sum(axis=1).astype(np.float64), \
        ~mismatch.any(axis=1)


def continuous_reward(positions, goal: ContinuousGoal, eps_pos: float = EPS_POS):
    if eps_pos <= 0:
        raise ContractError("eps_pos must be positive")
    d = np.linalg.norm(np.asarray(positions, dtype=np.float64) - goal.targets, axis=1)
    per_object = tuple(bool(v) for v in (d < eps_pos))
    reward = int(sum(per_object))
    return per_object, reward, all(per_object)


def batch_continuous_rewards(positions: np.ndarray, targets: np.ndarray,
                             eps_pos: float = EPS_POS):
    """Positions (B, 5, 3) against targets (B, 5, 3) or flattened (B, 15):
    per-object (B, 5) bool, rewards (B,), success (B,)."""
    positions = np.asarray(positions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(
        len(positions), N_OBJECTS, 3)
    d = np.linalg.norm(positions - targets, axis=2)
    per_object = d < eps_pos
    return per_object, per_object.sum(axis=1).astype(np.float64), \
        per_object.all(axis=1)


# ---------------------------------------------------------------------------
# evaluation classes


class ClassId:
    """Tagged evaluation class."""

    _REGISTRY: dict[str, "ClassId"] = {}
    __slots__ = ("tag", "continuous", "stack_size")

    def __init__(self, tag: str, continuous: bool, stack_size: int = 0):
        object.__setattr__(self, "tag", tag)
        object.__setattr__(self, "continuous", continuous)
        object.__setattr__(self, "stack_size", stack_size)
        ClassId._REGISTRY[tag] = self

    def __setattr__(self, *a):
        raise AttributeError("ClassId is immutable")

    def __repr__(self):
        return f"ClassId({self.tag})"

    @staticmethod
    def parse(tag: str) -> "ClassId":
        try:
            return ClassId._REGISTRY[tag]
        except KeyError:
            raise ContractError(f"unknown class tag {tag!r}") from None


C1 = ClassId("C1", False)
C2 = ClassId("C2", False)
C3 = ClassId("C3", False)
S2 = ClassId("S2", False)
S3 = ClassId("S3", False)
S4 = ClassId("S4", False)
S5 = ClassId("S5", False)
P3 = ClassId("P3", False)
S2_AND_S2 = ClassId("S2&S2", False)
S2_AND_S3 = ClassId("S2&S3", False)
P3_AND_S2 = ClassId("P3&S2", False)
ST0 = ClassId("ST0", True, 0)
ST2 = ClassId("ST2", True, 2)
ST3 = ClassId("ST3", True, 3)
ST4 = ClassId("ST4", True, 4)
ST5 = ClassId("ST5", True, 5)

SEMANTIC_CLASSES = (C1, C2, C3, S2, S3, S4, S5, P3, S2_AND_S2, S2_AND_S3, P3_AND_S2)
CONTINUOUS_CLASSES = (ST0, ST2, ST3, ST4, ST5)


def _spread_positions():
    """Parking positions so far apart that no predicate can hold; structure
    builders overwrite entries, using columns away from these spots."""
    return np.array([[3.0 * (i + 1), 3.0 * (i + 1), TABLE_Z + BLOCK_SIZE / 2]
                     for i in range(N_OBJECTS)])


def _chain_scene(positions, chain, base_xy):
    """Stack ``chain`` (top block first) into one column at base_xy."""
    for level, block in enumerate(reversed(chain)):
        positions[block] = [base_xy[0], base_xy[1],
                            TABLE_Z + BLOCK_SIZE / 2 + level * BLOCK_SIZE]


def _pyramid_scene(positions, top, base, base_xy):
    b1, b2 = sorted(base)
    z0 = TABLE_Z + BLOCK_SIZE / 2
    positions[b1] = [base_xy[0], base_xy[1], z0]
    positions[b2] = [base_xy[0] + BLOCK_SIZE, base_xy[1], z0]
    positions[top] = [base_xy[0] + BLOCK_SIZE / 2, base_xy[1], z0 + BLOCK_SIZE]


def _chain_config(chain):
    pos = _spread_positions()
    _chain_scene(pos, chain, (0.0, 0.0))
    return eval_predicates(pos)


def _pyramid_config(top, base):
    pos = _spread_positions()
    _pyramid_scene(pos, top, base, (0.0, 0.0))
    return eval_predicates(pos)


def _combo_config(builders):
    pos = _spread_positions()
    for k, build in enumerate(builders):
        build(pos, (0.0, -10.0 - 10.0 * k))
    return eval_predicates(pos)


def enumerate_class(class_id: ClassId) -> list[SemanticConfiguration]:
    """Exhaustive duplicate-free members of a semantic evaluation class.

    Stack and pyramid members are produced from geometric prototype scenes
    run through eval_predicates, so implied close bits are consistent with
    the thresholds by construction.
    """
    if class_id.continuous:
        raise ContractError(f"{class_id.tag} is a continuous class")
    blocks = range(N_OBJECTS)
    out: list[SemanticConfiguration] = []
    if class_id in (C1, C2, C3):
        n = int(class_id.tag[1])
        for pairs in combinations(CLOSE_PAIRS, n):
            out.append(SemanticConfiguration.from_predicates(close=pairs))
    elif class_id in (S2, S3, S4, S5):
        n = int(class_id.tag[1])
        for chain in permutations(blocks, n):
            out.append(_chain_config(chain))
    elif class_id is P3:
        for top in blocks:
            for base in combinations([b for b in blocks if b != top], 2):
                out.append(_pyramid_config(top, base))
    elif class_id is S2_AND_S2:
        seen = {}
        for c1 in permutations(blocks, 2):
            rest = [b for b in blocks if b not in c1]
            for c2 in permutations(rest, 2):
                cfg = _combo_config([
                    lambda p, xy, c=c1: _chain_scene(p, c, xy),
                    lambda p, xy, c=c2: _chain_scene(p, c, xy)])
                seen.setdefault(cfg, None)
        out.extend(seen)
    elif class_id is S2_AND_S3:
        for c2 in permutations(blocks, 2):
            rest = [b for b in blocks if b not in c2]
            for c3 in permutations(rest, 3):
                out.append(_combo_config([
                    lambda p, xy: _chain_scene(p, c2, xy),
                    lambda p, xy: _chain_scene(p, c3, xy)]))
    elif class_id is P3_AND_S2:
        for top in blocks:
            for base in combinations([b for b in blocks if b != top], 2):
                rest = [b for b in blocks if b != top and b not in base]
                for c2 in permutations(rest, 2):
                    out.append(_combo_config([
                        lambda p, xy: _pyramid_scene(p, top, base, xy),
                        lambda p, xy: _chain_scene(p, c2, xy)]))
    else:
        raise ContractError(f"unhandled class {class_id.tag}")
    return out


_CLASS_TABLE: dict[SemanticConfiguration, ClassId] | None = None


def _class_table() -> dict[SemanticConfiguration, ClassId]:
    global _CLASS_TABLE
    if _CLASS_TABLE is None:
        table: dict[SemanticConfiguration, ClassId] = {}
        for cid in SEMANTIC_CLASSES:
            for cfg in enumerate_class(cid):
                prev = table.get(cfg)
                if prev is not None and prev is not cid:
                    raise ContractError(
                        f"classes {prev.tag} and {cid.tag} overlap on {cfg}")
                table[cfg] = cid
        _CLASS_TABLE = table
    return _CLASS_TABLE


def classify(config: SemanticConfiguration) -> ClassId | None:
    return _class_table().get(config)


def export_class_tables(path) -> None:
    """JSON dump: class tag -> hex-encoded member bit vectors (bit k of the
    integer = entry k of the configuration)."""
    data = {cid.tag: [cfg.to_hex() for cfg in enumerate_class(cid)]
            for cid in SEMANTIC_CLASSES}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)


# ---------------------------------------------------------------------------
# goal sampling / generation


def sample_eval_goals(class_id: ClassId, k: int, rng):
    """k evaluation goals: without replacement for semantic classes,
    k generated target sets for continuous classes."""
    if class_id.continuous:
        return [generate_positions(class_id, rng) for _ in range(k)]
    members = enumerate_class(class_id)
    if k > len(members):
        raise ContractError(f"k={k} exceeds |{class_id.tag}|={len(members)}")
    idx = rng.choice(len(members), size=k, replace=False)
    return [members[i] for i in idx]


def random_table_spots(n: int, rng, min_sep: float = 3 * BLOCK_SIZE,
                        margin: float = BLOCK_SIZE, max_tries: int = 2000):
    lo = np.array([WORKSPACE_X[0] + margin, WORKSPACE_Y[0] + margin])
    hi = np.array([WORKSPACE_X[1] - margin, WORKSPACE_Y[1] - margin])
    spots: list[np.ndarray] = []
    for _ in range(max_tries):
        cand = rng.uniform(lo, hi)
        if all(np.linalg.norm(cand - s) >= min_sep for s in spots):
            spots.append(cand)
            if len(spots) == n:
                return spots
    raise ContractError("could not place non-overlapping table spots")


def generate_positions(class_id: ClassId, rng) -> ContinuousGoal:
    """Random continuous goal of a stack class: the stack column at a free
    table spot, remaining targets flat on the table."""
    if not class_id.continuous:
        raise ContractError(f"{class_id.tag} is not a continuous class")
    m = class_id.stack_size
    order = rng.permutation(N_OBJECTS)
    stack = order[:m]                     # bottom .. top
    flat = order[m:]
    n_spots = len(flat) + (1 if m else 0)
    spots = random_table_spots(n_spots, rng)
    targets = np.zeros((N_OBJECTS, 3))
    z0 = TABLE_Z + BLOCK_SIZE / 2
    if m:
        col = spots.pop()
        for level, block in enumerate(stack):
            targets[block] = [col[0], col[1], z0 + level * BLOCK_SIZE]
    for block, spot in zip(flat, spots):
        targets[block] = [spot[0], spot[1], z0]
    return ContinuousGoal(targets)


# ---------------------------------------------------------------------------
# reachability


def _support_map(config: SemanticConfiguration):
    supports = {i: [] for i in range(N_OBJECTS)}
    riders = {i: [] for i in range(N_OBJECTS)}
    for i, j in ABOVE_PAIRS:
        if config.above(i, j):
            supports[i].append(j)
            riders[j].append(i)
    return supports, riders


def _consistent_levels(config: SemanticConfiguration):
    """Assign integer heights satisfying every above(i,j): h_i = h_j + 1.
    Returns the level map, or None when the constraints are contradictory
    (which covers cycles of any length)."""
    edges = [(i, j) for i, j in ABOVE_PAIRS if config.above(i, j)]
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(N_OBJECTS)}
    for i, j in edges:
        adj[i].append((j, -1))
        adj[j].append((i, +1))
    level: dict[int, int] = {}
    for start in range(N_OBJECTS):
        if start in level:
            continue
        level[start] = 0
        queue = [start]
        while queue:
            u = queue.pop()
            for v, d in adj[u]:
                want = level[u] + d
                if v not in level:
                    level[v] = want
                    queue.append(v)
                elif level[v] != want:
                    return None
    return level


def reachable_filter(config: SemanticConfiguration) -> bool:
    """Physical-consistency rules for a configuration:
    consistent stacking heights (no cycles), at most one block resting on
    any block, at most two supports per block, and two supports only as a
    pyramid whose bases are close."""
    supports, riders = _support_map(config)
    for i in range(N_OBJECTS):
        if len(riders[i]) > 1 or len(supports[i]) > 2:
            return False
        if len(supports[i]) == 2 and not config.close(*supports[i]):
            return False
    return _consistent_levels(config) is not None


def count_reachable() -> int:
    """Approximate count of physically reachable configurations: enumerate
    above-structures passing reachable_filter, then count the free close
    bits per structure (pairs in the same stacking component have their
    close bit fixed by geometry, cross-component pairs are free)."""
    n_above = len(ABOVE_PAIRS)
    ids = np.arange(2 ** n_above, dtype=np.int64)
    bits = np.zeros((ids.size, n_above), dtype=np.uint8)
    for k in range(n_above):
        bits[:, k] = (ids >> k) & 1
    # vectorized prefilter: riders <= 1, supports <= 2, no 2-cycles
    mask = np.ones(ids.size, dtype=bool)
    for obj in range(N_OBJECTS):
        sup_cols = [k for k, (i, _) in enumerate(ABOVE_PAIRS) if i == obj]
        rid_cols = [k for k, (_, j) in enumerate(ABOVE_PAIRS) if j == obj]
        mask &= bits[:, sup_cols].sum(axis=1) <= 2
        mask &= bits[:, rid_cols].sum(axis=1) <= 1
    for i, j in CLOSE_PAIRS:
        a = ABOVE_INDEX[(i, j)] - len(CLOSE_PAIRS)
        b = ABOVE_INDEX[(j, i)] - len(CLOSE_PAIRS)
        mask &= ~((bits[:, a] == 1) & (bits[:, b] == 1))
    total = 0
    for row in bits[mask]:
        above = [pair for k, pair in enumerate(ABOVE_PAIRS) if row[k]]
        cfg = SemanticConfiguration.from_predicates(above=above)
        if _consistent_levels(cfg) is None:
            continue
        # pyramid base pairs are inside one component, so their forced close
        # bit is never counted as free
        comp = list(range(N_OBJECTS))

        def find(x):
            while comp[x] != x:
                comp[x] = comp[comp[x]]
                x = comp[x]
            return x

        for i, j in above:
            comp[find(i)] = find(j)
        free = sum(1 for i, j in CLOSE_PAIRS if find(i) != find(j))
        total += 2 ** free
    return total
