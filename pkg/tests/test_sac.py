"""Soft actor-critic: squashed-Gaussian math, bandit convergence, target
network plumbing, and checkpoint round-trips."""
import numpy as np
import pytest

from conftest import assert_grads_close, fd_grads
from stackrl.graphnet import ACTION_DIM, build_batch, forward
from stackrl.numcore import ContractError, Tape, mean_all
from stackrl.sac import (LOG_STD_MAX, LOG_STD_MIN, NeuralPolicy, SacAgent,
                         SacConfig, sample_actions_np, sample_actions_tape)


def flat_agent(hidden=8, semantic=True, config=None, seed=0):
    return SacAgent("FLAT", semantic=semantic, hidden=hidden,
                    readout_hidden=hidden, attention=False, equalize=False,
                    config=config, seed=seed)


def random_scene(rng, B=6, semantic=True):
    bodies = rng.normal(size=(B, 8))
    objects = rng.normal(size=(B, 5, 9))
    if semantic:
        goals = rng.integers(0, 2, (B, 30)).astype(np.float64)
    else:
        goals = rng.uniform(-0.3, 0.3, (B, 15))
    return bodies, objects, goals


def zero_scene(B):
    return (np.zeros((B, 8)), np.zeros((B, 5, 9)), np.zeros((B, 30)))


def test_squashed_logprob_matches_reference(rng):
    agent = flat_agent()
    bodies, objects, goals = random_scene(rng)
    batch = build_batch(bodies, objects, goals)
    eps = rng.standard_normal((6, ACTION_DIM))
    tape = Tape()
    actions, logp = sample_actions_tape(agent.actor, agent.actor_arch,
                                        batch, eps, tape)
    out = forward(agent.actor, agent.actor_arch, batch).value
    mu = out[:, :ACTION_DIM]
    log_std = np.clip(out[:, ACTION_DIM:], LOG_STD_MIN, LOG_STD_MAX)
    u = mu + np.exp(log_std) * eps
    gauss = -0.5 * eps ** 2 - log_std - 0.5 * np.log(2 * np.pi)
    corr = np.log(1.0 - np.tanh(u) ** 2 + 1e-300)
    ref = (gauss - corr).sum(axis=1, keepdims=True)
    assert np.allclose(actions.value, np.tanh(u), atol=1e-12)
    assert np.allclose(logp.value, ref, atol=1e-9)
    # numpy sampling path agrees with the tape path given the same noise
    class FixedEps:
        def standard_normal(self, shape):
            return eps
    a_np, logp_np = sample_actions_np(agent.actor, agent.actor_arch,
                                      batch, FixedEps())
    assert np.allclose(a_np, actions.value, atol=1e-12)
    assert np.allclose(logp_np, logp.value, atol=1e-9)


def test_logprob_gradient_finite_differences(rng):
    agent = flat_agent(hidden=4)
    bodies, objects, goals = random_scene(rng, B=3)
    batch = build_batch(bodies, objects, goals)
    eps = rng.standard_normal((3, ACTION_DIM))

    tape = Tape()
    _, logp = sample_actions_tape(agent.actor, agent.actor_arch, batch,
                                  eps, tape)
    tape.backward(mean_all(logp))
    analytic = {n: p.grad.copy() for n, p in agent.actor.items()}

    def loss_fn():
        t = Tape()
        _, lp = sample_actions_tape(agent.actor, agent.actor_arch, batch,
                                    eps, t)
        return float(np.mean(lp.value))

    assert_grads_close(analytic, fd_grads(agent.actor, loss_fn), tol=2e-4)


def test_critic_regresses_bandit_reward(rng):
    agent = flat_agent(config=SacConfig(gamma=0.0, lr_actor=1e-2, lr_critic=1e-2,
                                        max_reward=0.0, target_clip=False))
    B = 32
    bodies, objects, goals = zero_scene(B)
    actions = rng.uniform(-1, 1, (B, ACTION_DIM))
    batch = {"bodies": bodies, "objects": objects, "goals": goals,
             "actions": actions, "rewards": np.ones((B, 1)),
             "next_bodies": bodies, "next_objects": objects}
    for _ in range(800):
        agent.update_critics(batch, rng)
    cb = build_batch(bodies, objects, goals, actions=actions)
    q1 = forward(agent.critic1, agent.critic_arch, cb).value
    q2 = forward(agent.critic2, agent.critic_arch, cb).value
    assert np.max(np.abs(q1 - 1.0)) < 0.01
    assert np.max(np.abs(q2 - 1.0)) < 0.01


def test_actor_climbs_bandit_reward(rng):
    a_star = np.array([0.5, -0.3, 0.2, 0.0])

    def reward(a):
        return 1.0 - np.mean((a - a_star) ** 2, axis=1, keepdims=True)

    agent = flat_agent(config=SacConfig(gamma=0.0, alpha=0.05, lr_actor=3e-3, lr_critic=3e-3),
                       seed=1)
    B = 64
    bodies, objects, goals = zero_scene(B)
    for _ in range(700):
        actions = rng.uniform(-1, 1, (B, ACTION_DIM))
        batch = {"bodies": bodies, "objects": objects, "goals": goals,
                 "actions": actions, "rewards": reward(actions),
                 "next_bodies": bodies, "next_objects": objects}
        agent.update(batch, rng)
    a_det = agent.act(bodies[:1], objects[:1], goals[:1], deterministic=True)
    assert reward(a_det).item() > 0.9


def test_soft_update_blend(rng):
    agent = flat_agent()
    before = {n: p.value.copy() for n, p in agent.target1.items()}
    for _, p in agent.critic1.items():
        p.value += rng.normal(size=p.value.shape)
    agent.update_targets()
    for name, p in agent.target1.items():
        want = 0.95 * before[name] + 0.05 * agent.critic1[name].value
        assert np.allclose(p.value, want, atol=1e-12)
    # repeated updates close the gap geometrically
    gap0 = max(np.abs(p.value - agent.critic1[n].value).max()
               for n, p in agent.target1.items())
    for _ in range(99):
        agent.update_targets()
    gap99 = max(np.abs(p.value - agent.critic1[n].value).max()
                for n, p in agent.target1.items())
    assert gap99 == pytest.approx(gap0 * 0.95 ** 99, rel=1e-6)


def snapshot(store):
    return {n: p.value.copy() for n, p in store.items()}


def changed(store, snap):
    return any(not np.array_equal(p.value, snap[n])
               for n, p in store.items())


def test_update_isolation(rng):
    agent = flat_agent()
    B = 8
    bodies, objects, goals = zero_scene(B)
    batch = {"bodies": bodies, "objects": objects, "goals": goals,
             "actions": rng.uniform(-1, 1, (B, 4)),
             "rewards": np.ones((B, 1)),
             "next_bodies": bodies, "next_objects": objects}
    snaps = {t: snapshot(getattr(agent, t))
             for t in ("actor", "critic1", "critic2", "target1", "target2")}
    agent.update_critics(batch, rng)
    assert changed(agent.critic1, snaps["critic1"])
    assert changed(agent.critic2, snaps["critic2"])
    assert not changed(agent.actor, snaps["actor"])
    assert not changed(agent.target1, snaps["target1"])
    snaps["critic1"] = snapshot(agent.critic1)
    snaps["critic2"] = snapshot(agent.critic2)
    agent.update_actor(batch, rng)
    assert changed(agent.actor, snaps["actor"])
    assert not changed(agent.critic1, snaps["critic1"])
    assert not changed(agent.critic2, snaps["critic2"])
    assert not changed(agent.target2, snaps["target2"])


def test_act_and_rollout_adapter(rng):
    agent = SacAgent("GN", hidden=8, readout_hidden=8, seed=2)
    bodies, objects, goals = random_scene(rng, B=3)
    a1 = agent.act(bodies, objects, goals, deterministic=True)
    a2 = agent.act(bodies, objects, goals, deterministic=True)
    assert a1.shape == (3, 4) and np.array_equal(a1, a2)
    assert np.all(np.abs(a1) < 1.0)
    s1 = agent.act(bodies, objects, goals, rng=np.random.default_rng(5))
    s2 = agent.act(bodies, objects, goals, rng=np.random.default_rng(5))
    assert np.array_equal(s1, s2) and not np.array_equal(s1, a1)

    pol = NeuralPolicy(agent, rng=np.random.default_rng(6))
    with pytest.raises(ContractError):
        pol.act_batch(bodies, objects)
    pol.begin_episodes(bodies, objects, goals)
    assert pol.act_batch(bodies, objects).shape == (3, 4)
    with pytest.raises(ContractError):
        pol.begin_episodes(bodies, objects, np.zeros((3, 15)))


def test_update_on_hindsight_batch(rng):
    from test_replay import make_episode
    from stackrl.replay import ReplayBuffer

    buf = ReplayBuffer(capacity_episodes=4)
    for s in range(4):
        buf.store(make_episode(seed=s))
    batch = buf.sample_batch(16, rng)
    losses = []
    for seed in (3, 3):
        agent = SacAgent("GN", hidden=8, readout_hidden=8, seed=7)
        out = agent.update(batch, np.random.default_rng(seed))
        assert np.isfinite(out["critic_loss"])
        assert np.isfinite(out["actor_loss"])
        losses.append(out)
    assert losses[0] == losses[1]        # same params, same noise


def test_save_load_roundtrip(tmp_path, rng):
    agent = SacAgent("RN", hidden=8, readout_hidden=8, attention=False,
                     equalize=False, seed=4)
    B = 8
    bodies, objects, goals = zero_scene(B)
    batch = {"bodies": bodies, "objects": objects, "goals": goals,
             "actions": rng.uniform(-1, 1, (B, 4)),
             "rewards": np.ones((B, 1)),
             "next_bodies": bodies, "next_objects": objects}
    agent.update(batch, np.random.default_rng(8))
    path = tmp_path / "agent.npz"
    agent.save(path, extra_meta={"epoch": 3})
    clone, extra = SacAgent.load(path)
    assert extra == {"epoch": 3}
    for tag in ("actor", "critic1", "critic2", "target1", "target2"):
        a, b = getattr(agent, tag), getattr(clone, tag)
        assert all(np.array_equal(p.value, b[n].value) for n, p in a.items())
    # optimiser state survives: identical updates after the round-trip
    r1 = agent.update(batch, np.random.default_rng(9))
    r2 = clone.update(batch, np.random.default_rng(9))
    assert r1 == r2
