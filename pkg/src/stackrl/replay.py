"""Episode replay with hindsight goal relabelling.

Episodes are stored whole and FIFO-evicted.  Sampling draws uniform
(episode, timestep) pairs and, with probability k/(k+1), swaps the
behaviour goal for the configuration actually achieved at a later step of
the same episode ("future" strategy).  Rewards are never stored: they are
recomputed from achieved state and (possibly relabelled) goal at sample
time, so reward semantics stay consistent under relabelling.

Semantic goals additionally support a per-object variant: a hybrid goal
that keeps the behaviour goal except among a random subset of blocks,
whose mutual predicates are overwritten with the future achieved values.
Hybrids that violate the stacking feasibility rules fall back to the
plain full relabel.

A held-out goal filter supports transfer studies: an episode is rejected
outright when any of its achieved configurations belongs to the held-out
collection, so the buffer never contains direct evidence about those
goals.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .goalspace import (N_OBJECTS, OBJECT_BIT_INDICES, ContractError,
                        SemanticConfiguration, batch_continuous_rewards,
                        batch_semantic_rewards, reachable_filter)

RELABEL_K = 4                       # future goals per real goal

# (30, 5) membership: bit b concerns object i
_BIT_TOUCHES = np.zeros((30, N_OBJECTS), dtype=bool)
for _i in range(N_OBJECTS):
    _BIT_TOUCHES[np.asarray(OBJECT_BIT_INDICES[_i]), _i] = True


@dataclass(eq=False)
class Episode:
    """One rollout: T actions, T+1 states."""
    bodies: np.ndarray              # (T+1, 8)
    objects: np.ndarray             # (T+1, 5, 9)
    actions: np.ndarray             # (T, 4)
    achieved: np.ndarray            # (T+1, 30) uint8 semantic bits
    positions: np.ndarray           # (T+1, 5, 3) block centres
    goal: np.ndarray                # (30,) bits or (15,) flat targets

    def __post_init__(self):
        T = len(self.actions)
        self.bodies = np.asarray(self.bodies, dtype=np.float64)
        self.objects = np.asarray(self.objects, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.achieved = np.asarray(self.achieved, dtype=np.uint8)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if (self.bodies.shape != (T + 1, 8)
                or self.objects.shape != (T + 1, N_OBJECTS, 9)
                or self.achieved.shape != (T + 1, 30)
                or self.positions.shape != (T + 1, N_OBJECTS, 3)):
            raise ContractError("inconsistent episode array shapes")
        if self.goal.shape not in ((30,), (15,)):
            raise ContractError(f"bad goal shape {self.goal.shape}")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def semantic(self) -> bool:
        return self.goal.shape == (30,)

    def dump(self, path) -> None:
        from .blockworld import dump_trajectory
        cfgs = [SemanticConfiguration.from_array(a) for a in self.achieved]
        dump_trajectory(path, self.bodies, self.objects, self.actions, cfgs)


class ReplayBuffer:
    """FIFO episode store with future-strategy hindsight sampling."""

    def __init__(self, capacity_episodes: int, semantic: bool = True,
                 heldout=None, k_replay: int = RELABEL_K,
                 per_object_prob: float = 0.5):
        if capacity_episodes <= 0:
            raise ContractError("capacity must be positive")
        self.episodes: deque[Episode] = deque(maxlen=capacity_episodes)
        self.semantic = semantic
        self.heldout = heldout
        self.relabel_prob = k_replay / (k_replay + 1.0)
        self.per_object_prob = per_object_prob
        self.n_rejected = 0
        self.n_stored = 0

    def __len__(self):
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(ep.length for ep in self.episodes)

    def store(self, episode: Episode) -> bool:
        """Add an episode unless it touches the held-out goal collection."""
        if episode.semantic != self.semantic:
            raise ContractError("episode goal mode does not match buffer")
        if self.heldout is not None:
            for bits in episode.achieved:
                if SemanticConfiguration.from_array(bits) in self.heldout:
                    self.n_rejected += 1
                    return False
        self.episodes.append(episode)
        self.n_stored += 1
        return True

    # ------------------------------------------------------------- sampling

    def _hybrid_goal(self, goal_bits, future_bits, rng):
        """Per-object relabel: overwrite predicates internal to a random
        block subset with their future achieved values."""
        subset = rng.integers(0, 2, N_OBJECTS).astype(bool)
        if not subset.any() or subset.all():
            return None
        inside = ~_BIT_TOUCHES[:, ~subset].any(axis=1)
        if not inside.any():
            return None
        hybrid = goal_bits.copy()
        hybrid[inside] = future_bits[inside]
        cfg = SemanticConfiguration.from_array(hybrid.astype(np.uint8))
        if not reachable_filter(cfg):
            return None
        return hybrid

    def sample_batch(self, batch_size: int, rng, return_info: bool = False):
        """Uniform transitions with hindsight goals and fresh rewards."""
        if not self.episodes:
            raise ContractError("cannot sample from an empty buffer")
        eps = list(self.episodes)
        ep_idx = rng.integers(0, len(eps), size=batch_size)
        rows = {k: [] for k in ("bodies", "objects", "actions", "next_bodies",
                                "next_objects", "goals")}
        next_achieved = []
        next_positions = []
        relabeled = np.zeros(batch_size, dtype=bool)
        per_object_used = np.zeros(batch_size, dtype=bool)
        for b, e in enumerate(ep_idx):
            ep = eps[e]
            t = int(rng.integers(0, ep.length))
            goal = ep.goal
            if rng.uniform() < self.relabel_prob:
                relabeled[b] = True
                u = int(rng.integers(t + 1, ep.length + 1))
                if self.semantic:
                    future = ep.achieved[u].astype(np.float64)
                    hybrid = None
                    if rng.uniform() < self.per_object_prob:
                        hybrid = self._hybrid_goal(goal, future, rng)
                        per_object_used[b] = hybrid is not None
                    goal = hybrid if hybrid is not None else future
                else:
                    goal = ep.positions[u].reshape(15).copy()
            rows["bodies"].append(ep.bodies[t])
            rows["objects"].append(ep.objects[t])
            rows["actions"].append(ep.actions[t])
            rows["next_bodies"].append(ep.bodies[t + 1])
            rows["next_objects"].append(ep.objects[t + 1])
            rows["goals"].append(np.asarray(goal, dtype=np.float64))
            next_achieved.append(ep.achieved[t + 1])
            next_positions.append(ep.positions[t + 1])
        batch = {k: np.stack(v) for k, v in rows.items()}
        if self.semantic:
            _, rewards, success = batch_semantic_rewards(
                np.stack(next_achieved), batch["goals"].astype(np.uint8))
        else:
            _, rewards, success = batch_continuous_rewards(
                np.stack(next_positions), batch["goals"])
        batch["rewards"] = rewards[:, None]
        batch["success"] = success
        if return_info:
            batch["info"] = {"relabeled": relabeled,
                             "per_object": per_object_used}
        return batch
