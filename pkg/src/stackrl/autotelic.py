"""Goal discovery, learning-progress curriculum, and the training loops.

Semantic agents build goals out of their own trajectory endpoints: every
newly reached configuration joins a discovered-goal list that later
episodes sample from uniformly.  Continuous agents instead pick a stack
class through a learning-progress curriculum, generate target positions
for it, and measure their own competence on occasional deterministic
self-evaluation rollouts.

Parallel data collection is emulated in-process: one environment per
worker, all stepped in lockstep by a single batched policy, with buffer
and sampler updates applied between waves.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from .blockworld import BlockWorld
from .goalspace import (CONTINUOUS_CLASSES, ClassId, ContinuousGoal,
                        SemanticConfiguration, batch_continuous_rewards,
                        generate_positions)
from .numcore import ContractError
from .replay import Episode, ReplayBuffer
from .sac import NeuralPolicy, SacAgent

SELF_EVAL_PROB = 0.1      # fraction of rollouts used for competence probes
LP_EPSILON = 0.05         # uniform floor mixed into LP-based class sampling

_ZERO_GOAL = SemanticConfiguration.from_array(np.zeros(30, dtype=np.uint8))


# ---------------------------------------------------------------------------
# goal discovery


class DiscoveredGoals:
    """Insertion-ordered, duplicate-free set of semantic configurations."""

    def __init__(self):
        self._goals: list[SemanticConfiguration] = []
        self._seen: set[SemanticConfiguration] = set()

    def add(self, cfg: SemanticConfiguration) -> bool:
        if cfg in self._seen:
            return False
        self._seen.add(cfg)
        self._goals.append(cfg)
        return True

    def __contains__(self, cfg) -> bool:
        return cfg in self._seen

    def __len__(self) -> int:
        return len(self._goals)

    def __iter__(self):
        return iter(self._goals)

    @property
    def goals(self) -> tuple:
        return tuple(self._goals)


def sample_goals(discovered: DiscoveredGoals, n: int, rng) -> list:
    """n goals uniform with replacement; all-zero goals until anything
    has been discovered."""
    if n < 1:
        raise ContractError("need at least one goal")
    if len(discovered) == 0:
        return [_ZERO_GOAL] * n
    idx = rng.integers(0, len(discovered), size=n)
    return [discovered.goals[i] for i in idx]


def update_goals(trajectories, discovered: DiscoveredGoals,
                 skip=None) -> DiscoveredGoals:
    """Append each trajectory's final achieved configuration if unseen.
    skip: optional collection of configurations barred from discovery."""
    for ep in trajectories:
        last = SemanticConfiguration.from_array(ep.achieved[-1])
        if skip is not None and last in skip:
            continue
        discovered.add(last)
    return discovered


# ---------------------------------------------------------------------------
# learning-progress curriculum


class LpTracker:
    """Per-class ring buffers of self-evaluation outcomes.

    Learning progress is the absolute difference between the success
    rates of the recent and older halves of each buffer.
    """

    def __init__(self, classes=CONTINUOUS_CLASSES, queue_length: int = 1000,
                 epsilon: float = LP_EPSILON):
        if queue_length < 2:
            raise ContractError("queue_length must allow two halves")
        self.classes = tuple(classes)
        self.epsilon = epsilon
        self.results = {c: deque(maxlen=queue_length) for c in self.classes}

    def record(self, class_id: ClassId, success: bool) -> None:
        self.results[class_id].append(bool(success))

    def competence(self, class_id: ClassId) -> float:
        buf = self.results[class_id]
        if not buf:
            return 0.0
        recent = list(buf)[len(buf) // 2:]
        return float(np.mean(recent))

    def lp(self, class_id: ClassId) -> float:
        buf = list(self.results[class_id])
        if len(buf) < 2:
            return 0.0
        half = len(buf) // 2
        return abs(float(np.mean(buf[half:])) - float(np.mean(buf[:half])))

    def probabilities(self, uniform: bool = False) -> np.ndarray:
        k = len(self.classes)
        if uniform:
            return np.full(k, 1.0 / k)
        lps = np.array([self.lp(c) for c in self.classes])
        total = lps.sum()
        if total == 0.0:
            return np.full(k, 1.0 / k)
        return (1.0 - self.epsilon) * lps / total + self.epsilon / k


def sample_class_lp(tracker: LpTracker, classes, n: int, rng,
                    uniform: bool = False,
                    self_eval_prob: float = SELF_EVAL_PROB):
    """Pick a goal class per rollout; flag self-evaluation rollouts.

    Self-evaluations draw their class uniformly so competence estimates
    stay unbiased; ordinary rollouts follow the LP mixture (or plain
    uniform under the curriculum ablation).
    """
    classes = tuple(classes)
    if classes != tracker.classes:
        raise ContractError("class list does not match the tracker")
    flags = rng.uniform(size=n) < self_eval_prob
    probs = tracker.probabilities(uniform=uniform)
    picks = []
    for flag in flags:
        if flag:
            picks.append(classes[rng.integers(len(classes))])
        else:
            picks.append(classes[rng.choice(len(classes), p=probs)])
    return picks, flags


# ---------------------------------------------------------------------------
# lockstep rollout waves


def goal_array(goal) -> np.ndarray:
    """Flatten any goal form to the vector fed to the policy networks."""
    if isinstance(goal, SemanticConfiguration):
        return goal.as_array().astype(np.float64)
    if isinstance(goal, ContinuousGoal):
        return goal.targets.reshape(15).copy()
    return np.asarray(goal, dtype=np.float64)


def run_wave(envs, policy, goals, length: int, biased_init: float = 0.0,
             stop_when_done: bool = False):
    """Roll every environment for one episode in lockstep.

    goals go to the policy verbatim (controllers may want structured
    goals); episodes store their flattened form.  Returns (episodes,
    success flags); success means the goal held at any step.
    """
    B = len(envs)
    arrays = np.stack([goal_array(g) for g in goals])
    semantic = arrays.shape[1] == 30
    for env in envs:
        env.reset(biased_init)
    bodies_t, objects_t = zip(*(env.observe() for env in envs))
    bodies, objectss = [list(bodies_t)], [list(objects_t)]
    positions = [[env.positions() for env in envs]]
    achieved = [[env.achieved().as_array() for env in envs]]
    actions = []
    policy.begin_episodes(bodies[0], objectss[0], goals)
    success = _wave_success(achieved[-1], positions[-1], arrays, semantic)
    for _ in range(length):
        acts = np.asarray(policy.act_batch(bodies[-1], objectss[-1]))
        actions.append(acts)
        step_bodies, step_objects, step_pos, step_ach = [], [], [], []
        for env, act in zip(envs, acts):
            env.step(act)
            body, objects = env.observe()
            step_bodies.append(body)
            step_objects.append(objects)
            step_pos.append(env.positions())
            step_ach.append(env.achieved().as_array())
        bodies.append(step_bodies)
        objectss.append(step_objects)
        positions.append(step_pos)
        achieved.append(step_ach)
        success |= _wave_success(step_ach, step_pos, arrays, semantic)
        if stop_when_done and success.all():
            break
    episodes = []
    for b in range(B):
        episodes.append(Episode(
            bodies=np.stack([row[b] for row in bodies]),
            objects=np.stack([row[b] for row in objectss]),
            actions=np.stack([row[b] for row in actions]),
            achieved=np.stack([row[b] for row in achieved]),
            positions=np.stack([row[b] for row in positions]),
            goal=arrays[b]))
    return episodes, success


def _wave_success(step_achieved, step_positions, goal_arrays, semantic):
    if semantic:
        bits = np.stack(step_achieved)
        return (bits == goal_arrays.astype(np.uint8)).all(axis=1)
    _, _, success = batch_continuous_rewards(np.stack(step_positions),
                                             goal_arrays)
    return success


# ---------------------------------------------------------------------------
# training loops


class AutotelicTrainer:
    """Cycle engine: collect rollout waves, grow the goal set or the LP
    tracker, store episodes, then run gradient updates."""

    def __init__(self, agent: SacAgent, config, heldout=None):
        self.agent = agent
        self.config = config
        self.heldout = heldout
        self.semantic = agent.semantic
        self.rng = np.random.default_rng(config.seed)
        self.envs = [BlockWorld(seed=self.rng.integers(2 ** 31) + i)
                     for i in range(config.nb_mpis)]
        self.buffer = ReplayBuffer(
            capacity_episodes=config.buffer_episodes,
            semantic=self.semantic, heldout=heldout,
            k_replay=config.k_replay,
            per_object_prob=0.5 if self.semantic else 0.0)
        self.discovered = DiscoveredGoals()
        self.tracker = LpTracker(
            queue_length=config.curriculum_queue_length)
        self.policy = NeuralPolicy(agent, rng=self.rng)
        self.n_cycles = 0
        self.n_episodes = 0

    @property
    def biased_init(self) -> float:
        if getattr(self.config, "no_biased_init", False):
            return 0.0
        return self.config.biased_init

    def run_cycle(self) -> None:
        if self.semantic:
            self._collect_semantic()
        else:
            self._collect_continuous()
        if len(self.buffer):
            for _ in range(self.config.nb_updates):
                batch = self.buffer.sample_batch(self.config.batch_size,
                                                 self.rng)
                self.agent.update(batch, self.rng)
        self.n_cycles += 1

    def _collect_semantic(self) -> None:
        for _ in range(self.config.nb_rollouts_per_mpi):
            goals = sample_goals(self.discovered, len(self.envs), self.rng)
            self.policy.deterministic = False
            episodes, _ = run_wave(self.envs, self.policy,
                                   [goal_array(g) for g in goals],
                                   self.config.rollouts_length,
                                   biased_init=self.biased_init)
            update_goals(episodes, self.discovered, skip=self.heldout)
            for ep in episodes:
                self.buffer.store(ep)
            self.n_episodes += len(episodes)

    def _collect_continuous(self) -> None:
        uniform = getattr(self.config, "no_curriculum", False)
        for _ in range(self.config.nb_rollouts_per_mpi):
            classes, flags = sample_class_lp(
                self.tracker, self.tracker.classes, len(self.envs),
                self.rng, uniform=uniform,
                self_eval_prob=self.config.self_eval_curriculum)
            goals = [generate_positions(c, self.rng) for c in classes]
            self.policy.deterministic = flags
            episodes, success = run_wave(
                self.envs, self.policy, [goal_array(g) for g in goals],
                self.config.rollouts_length, biased_init=self.biased_init)
            for ep, cls, flag, ok in zip(episodes, classes, flags, success):
                if flag:
                    self.tracker.record(cls, ok)
                else:
                    self.buffer.store(ep)
            self.n_episodes += len(episodes)


def train_semantic(agent: SacAgent, config, heldout=None,
                   cycles: int | None = None) -> AutotelicTrainer:
    """Run the semantic goal loop for the given number of cycles."""
    if not agent.semantic:
        raise ContractError("agent is in continuous goal mode")
    trainer = AutotelicTrainer(agent, config, heldout=heldout)
    for _ in range(cycles if cycles is not None else config.nb_cycles):
        trainer.run_cycle()
    return trainer


def train_continuous(agent: SacAgent, config,
                     cycles: int | None = None) -> AutotelicTrainer:
    """Run the continuous goal loop for the given number of cycles."""
    if agent.semantic:
        raise ContractError("agent is in semantic goal mode")
    trainer = AutotelicTrainer(agent, config)
    for _ in range(cycles if cycles is not None else config.nb_cycles):
        trainer.run_cycle()
    return trainer
