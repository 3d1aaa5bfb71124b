"""Kinematic gripper-and-blocks simulator.

A 4-DoF gripper (dx, dy, dz, open/close command in [-1, 1]) moves over a
table with 5 cubic blocks.  There is no contact physics: a closing command
near a block grasps it, a held block tracks the gripper, and a released
block settles onto the highest support under its column (table or a block
top within half a block width).  A grasped block may carry exactly one
block resting on it - lifting a taller pile fails.

Scale constants are shared with the predicate thresholds in goalspace.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .goalspace import (BLOCK_SIZE, GEOM_SLACK, N_OBJECTS, TABLE_Z,
                        WORKSPACE_X, WORKSPACE_Y, eval_predicates,
                        random_table_spots)


@dataclass(frozen=True)
class DynamicsParams:
    block_size: float = BLOCK_SIZE
    table_z: float = TABLE_Z
    workspace_x: tuple = WORKSPACE_X
    workspace_y: tuple = WORKSPACE_Y
    grasp_radius: float = 0.05
    max_step: float = 0.05          # gripper motion per tick
    max_lift: float = 0.5           # gripper z range above the table
    aperture_rate: float = 0.5


DEFAULT_DYNAMICS = DynamicsParams()

EPISODE_LIMIT = 200


@dataclass
class WorldState:
    gripper_pos: np.ndarray
    gripper_aperture: float
    gripper_vel: np.ndarray
    held: int | None
    rider: int | None               # single block riding on the held one
    positions: np.ndarray           # (5, 3)
    orients: np.ndarray             # (5, 3), fixed zeros
    velocities: np.ndarray          # (5, 3)

    def copy(self) -> "WorldState":
        return WorldState(self.gripper_pos.copy(), self.gripper_aperture,
                          self.gripper_vel.copy(), self.held, self.rider,
                          self.positions.copy(), self.orients.copy(),
                          self.velocities.copy())


def _gripper_home(dyn: DynamicsParams) -> np.ndarray:
    return np.array([0.0, 0.0, dyn.table_z + 0.25])


def reset(rng, biased_init_prob: float, dyn: DynamicsParams = DEFAULT_DYNAMICS) -> WorldState:
    """Procedural scene reset.  With probability ``biased_init_prob`` a
    random stack of 2..5 blocks is pre-built, otherwise all blocks lie flat
    at well-separated table positions."""
    if not 0.0 <= biased_init_prob <= 1.0:
        raise ValueError("biased_init_prob must be in [0, 1]")
    z0 = dyn.table_z + dyn.block_size / 2
    positions = np.zeros((N_OBJECTS, 3))
    if rng.uniform() < biased_init_prob:
        size = int(rng.integers(2, N_OBJECTS + 1))
        order = rng.permutation(N_OBJECTS)
        stack, flat = order[:size], order[size:]
        spots = random_table_spots(len(flat) + 1, rng)
        col = spots.pop()
        for level, block in enumerate(stack):
            positions[block] = [col[0], col[1], z0 + level * dyn.block_size]
        for block, spot in zip(flat, spots):
            positions[block] = [spot[0], spot[1], z0]
    else:
        spots = random_table_spots(N_OBJECTS, rng)
        for block, spot in enumerate(spots):
            positions[block] = [spot[0], spot[1], z0]
    return WorldState(
        gripper_pos=_gripper_home(dyn),
        gripper_aperture=1.0,
        gripper_vel=np.zeros(3),
        held=None,
        rider=None,
        positions=positions,
        orients=np.zeros((N_OBJECTS, 3)),
        velocities=np.zeros((N_OBJECTS, 3)),
    )


def _clip_gripper(pos: np.ndarray, dyn: DynamicsParams) -> np.ndarray:
    return np.array([
        np.clip(pos[0], dyn.workspace_x[0], dyn.workspace_x[1]),
        np.clip(pos[1], dyn.workspace_y[0], dyn.workspace_y[1]),
        np.clip(pos[2], dyn.table_z + dyn.block_size / 2,
                dyn.table_z + dyn.max_lift),
    ])


def _blocks_directly_above(positions: np.ndarray, idx: int, dyn: DynamicsParams):
    out = []
    for k in range(N_OBJECTS):
        if k == idx:
            continue
        d = positions[k] - positions[idx]
        if (abs(d[2] - dyn.block_size) < 0.01 + GEOM_SLACK
                and np.hypot(d[0], d[1]) < dyn.block_size / 2 + GEOM_SLACK):
            out.append(k)
    return out


def _settle(positions: np.ndarray, idx: int, x: float, y: float,
            exclude: set, dyn: DynamicsParams) -> None:
    """Drop block ``idx`` at column (x, y): rest on the highest support
    under the column, else the table; nudge sideways out of any overlap."""
    half = dyn.block_size / 2
    z_table = dyn.table_z + half
    for _ in range(10):
        support_top = None
        for k in range(N_OBJECTS):
            if k == idx or k in exclude:
                continue
            if np.hypot(positions[k, 0] - x, positions[k, 1] - y) <= half + GEOM_SLACK:
                top = positions[k, 2]
                if support_top is None or top > support_top:
                    support_top = top
        z = z_table if support_top is None else support_top + dyn.block_size
        blocker = None
        for k in range(N_OBJECTS):
            if k == idx or k in exclude:
                continue
            horiz = np.hypot(positions[k, 0] - x, positions[k, 1] - y)
            if horiz < dyn.block_size - GEOM_SLACK and \
                    abs(positions[k, 2] - z) < dyn.block_size - GEOM_SLACK:
                blocker = k
                break
        if blocker is None:
            positions[idx] = [x, y, z]
            return
        d = np.array([x - positions[blocker, 0], y - positions[blocker, 1]])
        norm = np.linalg.norm(d)
        d = d / norm if norm > 1e-9 else np.array([1.0, 0.0])
        x = positions[blocker, 0] + d[0] * (dyn.block_size + 1e-6)
        y = positions[blocker, 1] + d[1] * (dyn.block_size + 1e-6)
    # pathological pile-up: scan a coarse grid for a free table cell
    for gx in np.arange(dyn.workspace_x[0] + half, dyn.workspace_x[1], dyn.block_size * 1.5):
        for gy in np.arange(dyn.workspace_y[0] + half, dyn.workspace_y[1], dyn.block_size * 1.5):
            clear = all(k == idx or k in exclude
                        or np.hypot(positions[k, 0] - gx, positions[k, 1] - gy) >= dyn.block_size
                        for k in range(N_OBJECTS))
            if clear:
                positions[idx] = [gx, gy, z_table]
                return
    raise RuntimeError("no free cell to settle block")


def step(state: WorldState, action, dyn: DynamicsParams = DEFAULT_DYNAMICS) -> WorldState:
    """Advance one tick.  Pure: returns a new state."""
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(4), -1.0, 1.0)
    new = state.copy()
    old_positions = state.positions
    new.gripper_pos = _clip_gripper(state.gripper_pos + a[:3] * dyn.max_step, dyn)
    cmd = a[3]
    new.gripper_aperture = float(np.clip(
        state.gripper_aperture + dyn.aperture_rate * cmd, 0.0, 1.0))

    if new.held is not None:
        if cmd > 0.0:
            held, rider = new.held, new.rider
            new.held = None
            new.rider = None
            exclude = {held} if rider is None else {held, rider}
            _settle(new.positions, held, new.gripper_pos[0], new.gripper_pos[1],
                    exclude - {held}, dyn)
            if rider is not None:
                top = new.positions[held]
                new.positions[rider] = [top[0], top[1], top[2] + dyn.block_size]
        else:
            new.positions[new.held] = new.gripper_pos
            if new.rider is not None:
                new.positions[new.rider] = new.gripper_pos + [0.0, 0.0, dyn.block_size]
    elif cmd < 0.0:
        dists = np.linalg.norm(state.positions - new.gripper_pos, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] < dyn.grasp_radius + GEOM_SLACK:
            riders = _blocks_directly_above(state.positions, nearest, dyn)
            grab = False
            rider = None
            if not riders:
                grab = True
            elif len(riders) == 1 and not _blocks_directly_above(
                    state.positions, riders[0], dyn):
                grab = True
                rider = riders[0]
            if grab:
                new.held = nearest
                new.rider = rider
                new.positions[nearest] = new.gripper_pos
                if rider is not None:
                    new.positions[rider] = new.gripper_pos + [0.0, 0.0, dyn.block_size]

    new.gripper_vel = new.gripper_pos - state.gripper_pos
    new.velocities = new.positions - old_positions
    return new


def observe(state: WorldState):
    """(body_state (8,), object_states (5, 9))."""
    body = np.concatenate([
        state.gripper_pos,
        [state.gripper_aperture],
        state.gripper_vel,
        [0.0 if state.held is None else 1.0],
    ])
    objects = np.concatenate(
        [state.positions, state.orients, state.velocities], axis=1)
    return body, objects


class BlockWorld:
    """Stateful convenience wrapper owning one scene and one RNG."""

    def __init__(self, seed=0, dynamics: DynamicsParams = DEFAULT_DYNAMICS):
        self.dynamics = dynamics
        self.rng = seed if isinstance(seed, np.random.Generator) \
            else np.random.default_rng(seed)
        self.state: WorldState | None = None

    def reset(self, biased_init_prob: float = 0.2) -> WorldState:
        self.state = reset(self.rng, biased_init_prob, self.dynamics)
        return self.state

    def step(self, action) -> WorldState:
        self.state = step(self.state, action, self.dynamics)
        return self.state

    def observe(self):
        return observe(self.state)

    def positions(self) -> np.ndarray:
        return self.state.positions.copy()

    def achieved(self):
        return eval_predicates(self.state.positions)


def dump_trajectory(path, bodies, objects, actions, achieved) -> None:
    """Per-step JSON lines: state observation, action, achieved configuration.
    The final line carries the terminal observation with a null action."""
    bodies = np.asarray(bodies)
    objects = np.asarray(objects)
    actions = np.asarray(actions)
    with open(path, "w", encoding="utf-8") as fh:
        for t in range(len(bodies)):
            rec = {
                "t": t,
                "body": bodies[t].tolist(),
                "objects": objects[t].tolist(),
                "action": actions[t].tolist() if t < len(actions) else None,
                "achieved": achieved[t].to_hex(),
            }
            fh.write(json.dumps(rec) + "\n")
