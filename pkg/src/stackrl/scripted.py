"""Deterministic scripted pick-and-place policy.

Used as a dynamics oracle: given a goal (semantic configuration or
continuous targets) it plans a sequence of (block, target position)
placements and executes them with a small finite-state controller that
emits 4-DoF gripper actions.  It exists to validate that every evaluation
goal is actually attainable under the simulator rules, and to sanity-check
reward plumbing end to end.
"""
from __future__ import annotations

import itertools

import numpy as np

from .goalspace import (ABOVE_PAIRS, BLOCK_SIZE, CLOSE_PAIRS, D_CLOSE,
                        EPS_POS, N_OBJECTS, TABLE_Z, ContinuousGoal,
                        ContractError, SemanticConfiguration, eval_predicates,
                        _consistent_levels)

Z0 = TABLE_Z + BLOCK_SIZE / 2

# widely spaced build sites: structures at different sites can never
# trip the 0.125 closeness threshold (pairwise separation >= 0.33)
BUILD_SITES = [(-0.18, -0.28), (0.18, -0.28), (-0.18, 0.28), (0.18, 0.28),
               (0.0, 0.0)]
CLOSE_TARGET = 2.0 * BLOCK_SIZE          # comfortable "close" distance
APART_MIN = D_CLOSE + 0.012              # comfortable "not close" distance
SITE_CLEARANCE = 0.30


# ---------------------------------------------------------------------------
# layout planning


def _components(edges, nodes):
    """Connected components of an undirected edge set over given nodes."""
    comp = {v: v for v in nodes}

    def find(v):
        while comp[v] != v:
            comp[v] = comp[comp[v]]
            v = comp[v]
        return v

    for a, b in edges:
        comp[find(a)] = find(b)
    groups = {}
    for v in nodes:
        groups.setdefault(find(v), []).append(v)
    return list(groups.values())


def cluster_centre(blocks, close_edges):
    """The block a cluster is built around: highest closeness degree."""
    want = {frozenset(e) for e in close_edges}
    return sorted(blocks, key=lambda v: (-sum(v in e for e in want), v))[0]


def _in_bounds(xy, margin=0.01):
    return (abs(xy[0]) <= 0.25 - margin) and (abs(xy[1]) <= 0.35 - margin)


def _place_cluster(blocks, close_edges, site):
    """Lay a close-only cluster around a site so that exactly the requested
    pairs fall under the closeness threshold.  The centre block sits exactly
    on the site."""
    want = {frozenset(e) for e in close_edges}
    centre = cluster_centre(blocks, close_edges)
    order = [centre] + sorted(
        (v for v in blocks if v != centre),
        key=lambda v: (-sum(v in e for e in want), v))
    pos = {centre: np.array(site, dtype=np.float64)}
    for v in order[1:]:
        placed_neighbours = [u for u in pos if frozenset((u, v)) in want]
        anchors = placed_neighbours or list(pos)
        best = None
        for u in anchors:
            for deg in range(0, 360, 10):
                ang = np.deg2rad(deg)
                cand = pos[u] + CLOSE_TARGET * np.array([np.cos(ang), np.sin(ang)])
                if not _in_bounds(cand):
                    continue
                ok = True
                for w, pw in pos.items():
                    d = np.linalg.norm(cand - pw)
                    if frozenset((w, v)) in want:
                        if not (1.2 * BLOCK_SIZE <= d <= D_CLOSE - 0.002):
                            ok = False
                            break
                    elif d < APART_MIN:
                        ok = False
                        break
                if ok:
                    score = np.linalg.norm(cand - site)
                    if best is None or score < best[0]:
                        best = (score, cand)
        if best is None:
            raise ContractError("cluster layout failed")
        pos[v] = best[1]
    return pos


class _SiteBook:
    """Hands out build anchors.  A block's current spot is preferred when
    the structure built there (of the given footprint radius) keeps clear
    of the closeness threshold around every anchor already in use and of
    the workspace edge."""

    def __init__(self, fresh_sites):
        self.fresh = [np.array(s, dtype=np.float64) for s in fresh_sites]
        self.used = []          # (xy, radius)

    def _clear(self, xy, radius):
        return all(np.linalg.norm(xy - u) >= D_CLOSE + radius + ru + 0.02
                   for u, ru in self.used)

    def take(self, preferred_xy=None, radius=0.0, roomy=False):
        if preferred_xy is not None:
            pref = np.asarray(preferred_xy, dtype=np.float64)
            if self._clear(pref, radius) and _in_bounds(pref, radius + 0.01):
                self.used.append((pref, radius))
                return pref, True
        # roomy structures (wide clusters) draw from the back of the list,
        # where the central site with full angular freedom sits
        while self.fresh:
            s = self.fresh.pop(-1 if roomy else 0)
            if self._clear(s, radius):
                self.used.append((s, radius))
                return s, False
        raise ContractError("out of build sites")


def plan_semantic(goal: SemanticConfiguration, positions=None, site_order=None):
    """Placements [(block, (x, y, z)), ...] realising a semantic goal from a
    flat scene.  When current positions are given, structures are anchored
    on a member block's spot and already-valid blocks stay put.  Raises
    ContractError if the goal has no consistent stacking interpretation or
    the layout search fails."""
    levels = _consistent_levels(goal)
    if levels is None:
        raise ContractError("goal has no consistent stacking interpretation")
    sites = [BUILD_SITES[i] for i in (site_order or range(len(BUILD_SITES)))]
    book = _SiteBook(sites)
    anchor_ok = positions is not None
    above = [(i, j) for i, j in ABOVE_PAIRS if goal.above(i, j)]
    close = [(i, j) for i, j in CLOSE_PAIRS if goal.close(i, j)]
    in_structure = {v for e in above for v in e}

    final = {}                 # block -> final position
    moved = set()              # blocks that need a placement action

    def put(v, xyz, needs_move=True):
        final[v] = np.asarray(xyz, dtype=np.float64)
        if needs_move:
            moved.add(v)

    for comp in _components([tuple(e) for e in above], sorted(in_structure)):
        supports = {}
        for i, j in above:
            if i in comp:
                supports.setdefault(i, []).append(j)
        tops = [v for v in comp if len(supports.get(v, [])) == 2]
        if tops:                                     # three-block pyramid
            (top,) = tops
            b1, b2 = supports[top]
            pref = positions[b1][:2] if anchor_ok else None
            site, anchored = book.take(pref, radius=0.06)
            put(b1, [site[0], site[1], Z0], needs_move=not anchored)
            put(b2, [site[0] + BLOCK_SIZE, site[1], Z0])
            put(top, [site[0] + BLOCK_SIZE / 2, site[1], Z0 + BLOCK_SIZE])
        else:                                        # vertical chain
            base = min(comp, key=lambda v: levels[v])
            pref = positions[base][:2] if anchor_ok else None
            site, anchored = book.take(pref, radius=0.0)
            for v in sorted(comp, key=lambda v: levels[v]):
                lvl = levels[v] - levels[base]
                put(v, [site[0], site[1], Z0 + lvl * BLOCK_SIZE],
                    needs_move=not (anchored and v == base))

    loose_close = [e for e in close if e[0] not in in_structure
                   and e[1] not in in_structure]
    in_cluster = {v for e in loose_close for v in e}
    for comp in _components(loose_close, sorted(in_cluster)):
        comp = sorted(comp)
        edges = [e for e in loose_close if e[0] in comp]
        centre = cluster_centre(comp, edges)
        pref = positions[centre][:2] if anchor_ok else None
        site, anchored = book.take(pref, radius=CLOSE_TARGET + 0.01,
                                   roomy=len(comp) >= 4)
        layout = _place_cluster(comp, edges, site)
        for v, p in layout.items():
            put(v, [p[0], p[1], Z0],
                needs_move=not (anchored and v == centre))

    # isolated blocks stay put when possible, else park at a spare site
    isolated = [v for v in range(N_OBJECTS) if v not in final]
    for v in isolated:
        if anchor_ok:
            put(v, positions[v], needs_move=False)
        else:
            site, _ = book.take()
            put(v, [site[0], site[1], Z0])
    for _ in range(len(isolated)):
        predicted = np.array([final[v] for v in range(N_OBJECTS)])
        if eval_predicates(predicted) == goal:
            break
        culprit = _violating_isolated(predicted, goal, isolated, moved)
        if culprit is None:
            break
        site, _ = book.take()
        put(culprit, [site[0], site[1], Z0])

    predicted = np.array([final[v] for v in range(N_OBJECTS)])
    if eval_predicates(predicted) != goal:
        raise ContractError("layout does not realise the goal")
    ordered = sorted(((v, final[v]) for v in moved), key=lambda kv: kv[1][2])
    if positions is None:
        return ordered
    return _order_with_occupancy(positions, ordered)


def _violating_isolated(predicted, goal, isolated, moved):
    got = eval_predicates(predicted)
    for k, (i, j) in enumerate(CLOSE_PAIRS + ABOVE_PAIRS):
        if got.bits[k] != goal.bits[k]:
            for v in (i, j):
                if v in isolated and v not in moved:
                    return v
    return None


def _order_with_occupancy(positions, placements):
    """Delay placements whose target column is still occupied by another
    block that has yet to move, keeping same-column placements bottom-up;
    break occupation cycles by staging the occupier at a free spot."""
    current = {v: np.asarray(positions[v], dtype=np.float64).copy()
               for v in range(N_OBJECTS)}
    finals = {v: np.asarray(t, dtype=np.float64) for v, t in placements}
    pending = [v for v, _ in placements]
    ordered = []

    def blocker(v):
        """(w, via_current_position) for the first block standing in the
        way of v's placement, or None."""
        tgt = finals[v]
        for w in pending:
            if w == v:
                continue
            if np.hypot(*(current[w][:2] - tgt[:2])) < 1.4 * BLOCK_SIZE:
                return w, True
            if np.hypot(*(finals[w][:2] - tgt[:2])) < 1.4 * BLOCK_SIZE \
                    and finals[w][2] < tgt[2] - 1e-9:
                return w, False     # a lower level of the same column first
        return None

    while pending:
        progressed = False
        for v in list(pending):
            if blocker(v) is None:
                ordered.append((v, finals[v].copy()))
                current[v] = finals[v].copy()
                pending.remove(v)
                progressed = True
        if not progressed:
            # somebody sits on a needed column: move it out of the way
            occupier = next(b[0] for b in map(blocker, pending)
                            if b is not None and b[1])
            spot = _free_table_spot(current, list(finals.values()))
            stage = np.array([spot[0], spot[1], Z0])
            ordered.append((occupier, stage))
            current[occupier] = stage
    return ordered


def plan_semantic_robust(goal: SemanticConfiguration, positions=None, rng=None):
    """plan_semantic with parked-layout site permutations as fallback."""
    attempts = []
    if positions is not None:
        attempts.append(dict(positions=positions))
    attempts.append(dict(positions=None))
    if rng is not None:
        attempts += [dict(positions=None,
                          site_order=tuple(int(x) for x in rng.permutation(5)))
                     for _ in range(6)]
    else:
        attempts += [dict(positions=None, site_order=o) for o in
                     itertools.islice(itertools.permutations(range(5)), 6)]
    err = None
    for kw in attempts:
        try:
            plan = plan_semantic(goal, **kw)
            if kw.get("positions") is None and positions is not None:
                plan = _order_with_occupancy(positions, plan)
            return plan
        except ContractError as exc:
            err = exc
    raise err


def plan_continuous(positions: np.ndarray, goal: ContinuousGoal):
    """Placements for per-object targets: bottom-up by target height."""
    todo = sorted(range(N_OBJECTS), key=lambda v: goal.targets[v, 2])
    todo = [v for v in todo
            if np.linalg.norm(positions[v] - goal.targets[v]) > 0.5 * EPS_POS]
    return _order_with_occupancy(
        positions, [(v, goal.targets[v].copy()) for v in todo])


def _free_table_spot(current, targets):
    for x in np.linspace(-0.2, 0.2, 9):
        for y in np.linspace(-0.3, 0.3, 13):
            cand = np.array([x, y])
            near_block = any(np.hypot(*(p[:2] - cand)) < 0.12
                             for p in current.values())
            near_target = any(np.hypot(*(np.asarray(t)[:2] - cand)) < 0.12
                              for t in targets)
            if not (near_block or near_target):
                return cand
    raise ContractError("no staging spot available")


# ---------------------------------------------------------------------------
# execution


class ScriptedPolicy:
    """Finite-state pick-and-place controller over a placement plan.

    Phases per placement: straight-line move to the block, close the
    gripper, straight-line move to the target, open.  The simulator is
    kinematic so no safe-height detours are needed; movement commands are
    saturated proportional steps and each leg completes in bounded time.
    After the plan is exhausted the policy holds still.
    """

    FETCH, GRASP, CARRY, RELEASE, DONE = range(5)

    def __init__(self):
        self.plan = []
        self.phase = self.DONE
        self.block = None
        self.target = None

    def set_plan(self, placements):
        self.plan = list(placements)
        self._advance()

    def plan_for(self, positions, goal, rng=None):
        if isinstance(goal, SemanticConfiguration):
            self.set_plan(plan_semantic_robust(goal, positions, rng))
        else:
            self.set_plan(plan_continuous(positions, goal))

    def _advance(self):
        if self.plan:
            self.block, self.target = self.plan.pop(0)
            self.phase = self.FETCH
        else:
            self.block, self.target = None, None
            self.phase = self.DONE

    @staticmethod
    def _move(gripper, dest):
        return np.clip((np.asarray(dest) - gripper) / 0.05, -1.0, 1.0)

    def act(self, body, objects):
        """One action from the current observation (body (8,), objects (5, 9))."""
        gripper = np.asarray(body[:3], dtype=np.float64)
        holding = body[7] > 0.5
        positions = np.asarray(objects)[:, :3]
        a = np.zeros(4)
        if self.phase == self.DONE:
            return a
        if self.phase == self.FETCH:
            bp = positions[self.block]
            if np.linalg.norm(gripper - bp) < 1e-6:
                self.phase = self.GRASP
            else:
                a[:3] = self._move(gripper, bp)
                return a
        if self.phase == self.GRASP:
            if holding:
                self.phase = self.CARRY
            else:
                a[3] = -1.0
                return a
        if self.phase == self.CARRY:
            if np.linalg.norm(gripper - np.asarray(self.target)) < 1e-6:
                self.phase = self.RELEASE
            else:
                a[:3] = self._move(gripper, self.target)
                return a
        if self.phase == self.RELEASE:
            if holding:
                a[3] = 1.0
                return a
            self._advance()
            if self.phase == self.FETCH:
                a[:3] = self._move(gripper, positions[self.block])
        return a


class ScriptedEvalPolicy:
    """Batch adapter matching the evaluation rollout protocol: one
    independent controller per environment in the wave."""

    def __init__(self, rng=None):
        self.rng = rng
        self.controllers = []

    def begin_episodes(self, bodies, objectss, goals):
        self.controllers = []
        for body, objects, goal in zip(bodies, objectss, goals):
            ctrl = ScriptedPolicy()
            ctrl.plan_for(np.asarray(objects)[:, :3], goal, self.rng)
            self.controllers.append(ctrl)

    def act_batch(self, bodies, objectss):
        return np.stack([
            ctrl.act(body, objects)
            for ctrl, body, objects in zip(self.controllers, bodies, objectss)
        ])
