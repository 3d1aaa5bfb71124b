"""Soft actor-critic for goal-conditioned block manipulation.

The actor outputs mean and log-std of a 4-d Gaussian squashed through
tanh.  Twin critics score (state, goal, action) triples; slow-moving
target copies provide the bootstrap values.  Every transition bootstraps
(the task has no terminal states, episodes end on a time limit only).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .graphnet import (ACTION_DIM, BODY_DIM, EDGE_FEAT, NODE_FEAT,
                       Architecture, NetDims, build_batch, build_params,
                       forward, plan_architecture)
from .numcore import (Adam, ContractError, ParamStore, Tape, Var, add, clamp,
                      concat_cols, exp, mean_all, minimum, mul, neg,
                      slice_cols, softplus, sub, sum_cols, tanh)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_2 = float(np.log(2.0))


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.95           # target <- tau*target + (1-tau)*critic
    alpha: float = 0.2          # fixed entropy temperature
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    max_reward: float = 5.0     # per-step reward ceiling, for target clipping
    target_clip: bool = True    # clip bootstrap targets to the return range
    target_every: int = 10      # gradient steps between target soft-updates


def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _squash_logprob(u: np.ndarray, eps: np.ndarray,
                    log_std: np.ndarray) -> np.ndarray:
    """log pi(a|s) for a = tanh(u), u = mu + std*eps.  (B, 1)."""
    gauss = -0.5 * eps * eps - log_std - 0.5 * _LOG_2PI
    corr = 2.0 * (_LOG_2 - u - _np_softplus(-2.0 * u))
    return (gauss - corr).sum(axis=1, keepdims=True)


def sample_actions_np(store: ParamStore, arch: Architecture, batch,
                      rng=None, deterministic: bool = False):
    """Plain numpy action sampling for rollouts.

    Returns (actions, log_probs); log_probs is None when deterministic.
    """
    out = forward(store, arch, batch).value
    mu = out[:, :ACTION_DIM]
    if deterministic:
        return np.tanh(mu), None
    if rng is None:
        raise ContractError("stochastic sampling needs an rng")
    log_std = np.clip(out[:, ACTION_DIM:], LOG_STD_MIN, LOG_STD_MAX)
    eps = rng.standard_normal(mu.shape)
    u = mu + np.exp(log_std) * eps
    return np.tanh(u), _squash_logprob(u, eps, log_std)


def sample_actions_tape(store: ParamStore, arch: Architecture, batch,
                        eps: np.ndarray, tape: Tape):
    """Reparameterised actions and log-probs as tracked variables."""
    out = forward(store, arch, batch, tape=tape, trainable=True)
    mu = slice_cols(out, 0, ACTION_DIM)
    log_std = clamp(slice_cols(out, ACTION_DIM, 2 * ACTION_DIM),
                    LOG_STD_MIN, LOG_STD_MAX)
    u = add(mu, mul(exp(log_std), Var(eps)))
    actions = tanh(u)
    # log N(u) - log|da/du|, with log(1 - tanh(u)^2) expanded through
    # softplus for numerical stability at large |u|
    const = Var(-0.5 * eps * eps - 0.5 * _LOG_2PI - 2.0 * _LOG_2)
    elem = add(add(const, neg(log_std)),
               mul(Var(2.0), add(u, softplus(mul(Var(-2.0), u)))))
    return actions, sum_cols(elem)


class SacAgent:
    """Actor, twin critics and their targets, plus the three optimisers."""

    def __init__(self, kind: str, semantic: bool = True, hidden: int = 256,
                 readout_hidden: int = 256, attention: bool = True,
                 equalize: bool = True, config: SacConfig | None = None,
                 seed: int = 0):
        self.kind = kind
        self.semantic = semantic
        self.hidden = hidden
        self.readout_hidden = readout_hidden
        self.attention = attention
        self.equalize = equalize
        self.config = config or SacConfig()
        goal_flat = 30 if semantic else 15
        self.actor_arch = plan_architecture(
            kind, NetDims(node_feat=NODE_FEAT, edge_feat=EDGE_FEAT,
                          u_feat=BODY_DIM, goal_flat=goal_flat,
                          out_dim=2 * ACTION_DIM),
            hidden, readout_hidden, attention, equalize)
        self.critic_arch = plan_architecture(
            kind, NetDims(node_feat=NODE_FEAT, edge_feat=EDGE_FEAT,
                          u_feat=BODY_DIM + ACTION_DIM, goal_flat=goal_flat,
                          out_dim=1),
            hidden, readout_hidden, attention, equalize)
        rng = np.random.default_rng(seed)
        self.actor = build_params(self.actor_arch, rng)
        self.critic1 = build_params(self.critic_arch, rng)
        self.critic2 = build_params(self.critic_arch, rng)
        self.target1 = self.critic1.copy()
        self.target2 = self.critic2.copy()
        self.actor_opt = Adam(self.actor, lr=self.config.lr_actor)
        self.critic1_opt = Adam(self.critic1, lr=self.config.lr_critic)
        self.critic2_opt = Adam(self.critic2, lr=self.config.lr_critic)
        self._update_calls = 0

    # ------------------------------------------------------------ rollouts

    def act(self, bodies, objectss, goals, rng=None,
            deterministic=False) -> np.ndarray:
        """Sample actions; deterministic may be a flag or a (B,) row mask."""
        batch = build_batch(bodies, objectss, goals)
        if isinstance(deterministic, np.ndarray):
            stoch, _ = sample_actions_np(self.actor, self.actor_arch, batch,
                                         rng)
            det, _ = sample_actions_np(self.actor, self.actor_arch, batch,
                                       deterministic=True)
            return np.where(deterministic[:, None], det, stoch)
        actions, _ = sample_actions_np(self.actor, self.actor_arch, batch,
                                       rng, deterministic)
        return actions

    # ------------------------------------------------------------- updates

    def update_critics(self, batch: dict, rng) -> float:
        """One gradient step on both critics toward the soft target."""
        cfg = self.config
        nb = build_batch(batch["next_bodies"], batch["next_objects"],
                         batch["goals"])
        next_a, next_logp = sample_actions_np(
            self.actor, self.actor_arch, nb, rng)
        ncb = build_batch(batch["next_bodies"], batch["next_objects"],
                          batch["goals"], actions=next_a)
        q1 = forward(self.target1, self.critic_arch, ncb).value
        q2 = forward(self.target2, self.critic_arch, ncb).value
        # rewards are measured against the per-step ceiling, making every
        # target nonpositive: zero-initialised critics then start at the
        # optimistic boundary and the clip below corrects overestimation
        # sample by sample instead of letting it compound
        rewards = batch["rewards"] - cfg.max_reward
        y = rewards + cfg.gamma * (
            np.minimum(q1, q2) - cfg.alpha * next_logp)
        if cfg.target_clip:
            hi = cfg.max_reward / max(1.0 - cfg.gamma, 1e-6)
            y = np.clip(y, -hi, 0.0)

        tape = Tape()
        cb = build_batch(batch["bodies"], batch["objects"], batch["goals"],
                         actions=batch["actions"])
        pred1 = forward(self.critic1, self.critic_arch, cb, tape=tape)
        pred2 = forward(self.critic2, self.critic_arch, cb, tape=tape)
        d1 = sub(pred1, Var(y))
        d2 = sub(pred2, Var(y))
        loss = add(mean_all(mul(d1, d1)), mean_all(mul(d2, d2)))
        tape.backward(loss)
        self.critic1_opt.step()
        self.critic2_opt.step()
        return loss.value.item()

    def update_actor(self, batch: dict, rng) -> float:
        """One gradient step maximising min-Q minus entropy cost."""
        cfg = self.config
        B = batch["bodies"].shape[0]
        tape = Tape()
        ab = build_batch(batch["bodies"], batch["objects"], batch["goals"])
        eps = rng.standard_normal((B, ACTION_DIM))
        actions, logp = sample_actions_tape(
            self.actor, self.actor_arch, ab, eps, tape)
        u_crit = concat_cols(Var(batch["bodies"]), actions)
        q1 = forward(self.critic1, self.critic_arch, ab, tape=tape,
                     trainable=False, u_var=u_crit)
        q2 = forward(self.critic2, self.critic_arch, ab, tape=tape,
                     trainable=False, u_var=u_crit)
        loss = mean_all(sub(mul(Var(cfg.alpha), logp), minimum(q1, q2)))
        tape.backward(loss)
        self.actor_opt.step()
        return loss.value.item()

    def update_targets(self) -> None:
        tau = self.config.tau
        for target, critic in ((self.target1, self.critic1),
                               (self.target2, self.critic2)):
            for name, p in target.items():
                p.value *= tau
                p.value += (1.0 - tau) * critic[name].value

    def update(self, batch: dict, rng) -> dict:
        """One full SAC step.  Target networks move only every
        ``target_every`` calls: tracking the critics after every gradient
        step is close enough to self-bootstrap that the values run away."""
        closs = self.update_critics(batch, rng)
        aloss = self.update_actor(batch, rng)
        self._update_calls += 1
        if self._update_calls % self.config.target_every == 0:
            self.update_targets()
        return {"critic_loss": closs, "actor_loss": aloss}

    # -------------------------------------------------------- persistence

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {}
        for tag, store in (("actor", self.actor), ("critic1", self.critic1),
                           ("critic2", self.critic2),
                           ("target1", self.target1),
                           ("target2", self.target2)):
            for name, p in store.items():
                arrays[f"{tag}/{name}"] = p.value
        for tag, opt in (("opt_actor", self.actor_opt),
                         ("opt_critic1", self.critic1_opt),
                         ("opt_critic2", self.critic2_opt)):
            arrays.update(opt.state_arrays(prefix=f"{tag}/"))
        meta = {"kind": self.kind, "semantic": self.semantic,
                "hidden": self.hidden, "readout_hidden": self.readout_hidden,
                "attention": self.attention, "equalize": self.equalize,
                "config": asdict(self.config),
                "update_calls": self._update_calls}
        if extra_meta:
            meta["extra"] = extra_meta
        arrays["__meta__"] = np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> tuple["SacAgent", dict]:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(bytes(arrays.pop("__meta__")).decode())
        agent = cls(meta["kind"], semantic=meta["semantic"],
                    hidden=meta["hidden"],
                    readout_hidden=meta["readout_hidden"],
                    attention=meta["attention"], equalize=meta["equalize"],
                    config=SacConfig(**meta["config"]))
        for tag, store in (("actor", agent.actor), ("critic1", agent.critic1),
                           ("critic2", agent.critic2),
                           ("target1", agent.target1),
                           ("target2", agent.target2)):
            for name, p in store.items():
                p.value[...] = arrays[f"{tag}/{name}"]
        for tag, opt in (("opt_actor", agent.actor_opt),
                         ("opt_critic1", agent.critic1_opt),
                         ("opt_critic2", agent.critic2_opt)):
            opt.load_state_arrays(arrays, prefix=f"{tag}/")
        agent._update_calls = int(meta.get("update_calls", 0))
        return agent, meta.get("extra", {})


class NeuralPolicy:
    """Batch rollout adapter around an agent.

    Mirrors the scripted evaluator protocol (begin_episodes / act_batch)
    but takes goals as flat arrays: (B, 30) predicate bits or (B, 15)
    stacked block targets.
    """

    def __init__(self, agent: SacAgent, rng=None,
                 deterministic: bool = False):
        self.agent = agent
        self.rng = rng
        self.deterministic = deterministic
        self._goals = None

    def begin_episodes(self, bodies, objectss, goals) -> None:
        goals = np.asarray(goals, dtype=np.float64)
        want = 30 if self.agent.semantic else 15
        if goals.ndim != 2 or goals.shape[1] != want:
            raise ContractError(f"goals must be (B, {want})")
        self._goals = goals

    def act_batch(self, bodies, objectss) -> np.ndarray:
        if self._goals is None:
            raise ContractError("begin_episodes must run before act_batch")
        return self.agent.act(np.asarray(bodies), np.asarray(objectss),
                              self._goals, rng=self.rng,
                              deterministic=self.deterministic)
