"""Predicate semantics, reward functions, class enumeration, and the
reachability filter, cross-checked against brute-force geometry."""
import itertools
import json

import numpy as np
import pytest

from stackrl import goalspace as gs


# ---------------------------------------------------------------- predicates

def flat_scene(xy, z=None):
    z0 = gs.TABLE_Z + gs.BLOCK_SIZE / 2
    pos = np.zeros((5, 3))
    for i, p in enumerate(xy):
        pos[i, :2] = p
        pos[i, 2] = z0 if z is None else z[i]
    return pos


def test_far_apart_scene_is_all_zero():
    pos = flat_scene([(0, 0), (0.6, 0), (1.2, 0), (0, 0.6), (0.6, 0.6)])
    cfg = gs.eval_predicates(pos)
    assert cfg == gs.SemanticConfiguration.zeros()
    assert cfg.as_array().sum() == 0


def test_coaxial_block_gap_gives_above_and_close():
    pos = flat_scene([(0, 0), (3, 3), (6, 6), (9, 9), (12, 12)])
    pos[1] = pos[0] + [0, 0, gs.BLOCK_SIZE]
    cfg = gs.eval_predicates(pos)
    assert cfg.above(1, 0) and not cfg.above(0, 1)
    assert cfg.close(0, 1)
    assert cfg.as_array().sum() == 2


def test_close_threshold_boundary():
    # 2.5 block sizes is the cutoff: just inside counts, exactly at counts
    # via the deterministic slack, just outside does not
    for d, want in [(0.1249, True), (0.125, True), (0.12500001, False)]:
        pos = flat_scene([(0, 0), (d, 0), (3, 3), (6, 6), (9, 9)])
        assert gs.eval_predicates(pos).close(0, 1) is want


def test_above_tolerances():
    base = flat_scene([(0, 0), (5, 5), (10, 10), (15, 15), (20, 20)])
    # vertical gap off by more than 0.01 breaks the predicate
    p = base.copy(); p[1] = p[0] + [0, 0, gs.BLOCK_SIZE + 0.02]
    assert not gs.eval_predicates(p).above(1, 0)
    # horizontal offset up to 0.025 still counts (pyramid top case)
    p = base.copy(); p[1] = p[0] + [0.025, 0, gs.BLOCK_SIZE]
    assert gs.eval_predicates(p).above(1, 0)
    p = base.copy(); p[1] = p[0] + [0.03, 0, gs.BLOCK_SIZE]
    assert not gs.eval_predicates(p).above(1, 0)


def test_predicates_match_brute_force_on_random_scenes():
    rng = np.random.default_rng(0)
    n = 3000
    # mix: uniform scatter, tight clusters, and exact stacks
    scenes = np.zeros((n, 5, 3))
    z0 = gs.TABLE_Z + gs.BLOCK_SIZE / 2
    for s in range(n):
        kind = s % 3
        if kind == 0:
            scenes[s, :, 0] = rng.uniform(*gs.WORKSPACE_X, 5)
            scenes[s, :, 1] = rng.uniform(*gs.WORKSPACE_Y, 5)
            scenes[s, :, 2] = z0 + rng.integers(0, 3, 5) * gs.BLOCK_SIZE
        elif kind == 1:
            centre = rng.uniform(-0.1, 0.1, 2)
            scenes[s, :, :2] = centre + rng.uniform(-0.1, 0.1, (5, 2))
            scenes[s, :, 2] = z0 + rng.choice([0.0, gs.BLOCK_SIZE], 5)
        else:
            scenes[s, :, :2] = rng.uniform(-0.2, 0.2, (5, 2))
            scenes[s, :, 2] = z0
            scenes[s, 1] = scenes[s, 0] + [0, 0, gs.BLOCK_SIZE]
    got = gs.eval_predicates_batch(scenes)
    for s in range(n):
        cfg = gs.eval_predicates(scenes[s])
        bits = np.zeros(30)
        for k, (i, j) in enumerate(gs.CLOSE_PAIRS):
            d = np.linalg.norm(scenes[s, i] - scenes[s, j])
            bits[k] = d < gs.D_CLOSE + gs.GEOM_SLACK
        for k, (i, j) in enumerate(gs.ABOVE_PAIRS):
            dz = scenes[s, i, 2] - scenes[s, j, 2]
            dxy = np.linalg.norm(scenes[s, i, :2] - scenes[s, j, :2])
            bits[10 + k] = (abs(dz - gs.BLOCK_SIZE) < gs.EPS_Z + gs.GEOM_SLACK
                            and dxy < gs.EPS_XY + gs.GEOM_SLACK)
        assert np.array_equal(cfg.as_array(), bits), f"scene {s}"
        assert np.array_equal(got[s], bits)


# ------------------------------------------------------------------- rewards

def test_semantic_reward_identity_goal():
    cfg = gs.enumerate_class(gs.S3)[0]
    per_obj, reward, success = gs.semantic_reward(cfg, cfg)
    assert per_obj == (1.0,) * 5
    assert reward == 5.0 and success


def test_semantic_reward_partial():
    goal = gs.SemanticConfiguration.zeros()
    achieved = gs.SemanticConfiguration.from_predicates(close=[(0, 1)])
    per_obj, reward, success = gs.semantic_reward(achieved, goal)
    # blocks 0 and 1 each carry a wrong bit: 3 of 5 objects satisfied
    assert reward == 3.0 and not success
    assert per_obj == (0.0, 0.0, 1.0, 1.0, 1.0)


def test_batch_semantic_rewards_agree():
    rng = np.random.default_rng(1)
    achieved = rng.integers(0, 2, (64, 30)).astype(np.uint8)
    goals = rng.integers(0, 2, (64, 30)).astype(np.uint8)
    per_obj, rewards, success = gs.batch_semantic_rewards(achieved, goals)
    for b in range(64):
        a = gs.SemanticConfiguration.from_array(achieved[b])
        g = gs.SemanticConfiguration.from_array(goals[b])
        po, r, s = gs.semantic_reward(a, g)
        assert per_obj[b].tolist() == [bool(v) for v in po]
        assert rewards[b] == r and success[b] == s


def test_continuous_reward_counts_blocks_in_range():
    z0 = gs.TABLE_Z + gs.BLOCK_SIZE / 2
    targets = np.array([[0.1 * i - 0.2, 0.0, z0] for i in range(5)])
    goal = gs.ContinuousGoal(targets)
    pos = targets.copy()
    per_obj, reward, success = gs.continuous_reward(pos, goal)
    assert reward == 5.0 and success
    pos2 = pos.copy()
    pos2[2] += [0.06, 0, 0]          # one block just past the 0.05 radius
    per_obj, reward, success = gs.continuous_reward(pos2, goal)
    assert reward == 4.0 and not success and per_obj[2] == 0.0
    pos3 = pos.copy()
    pos3[1] += [0.03, 0.03, 0]       # within radius: sqrt(18)/100 < 0.05
    _, reward, success = gs.continuous_reward(pos3, goal)
    assert reward == 5.0 and success


def test_batch_continuous_rewards_agree():
    rng = np.random.default_rng(2)
    z0 = gs.TABLE_Z + gs.BLOCK_SIZE / 2
    goals = np.zeros((32, 5, 3))
    goals[:, :, 0] = rng.uniform(-0.2, 0.2, (32, 5))
    goals[:, :, 1] = rng.uniform(-0.3, 0.3, (32, 5))
    goals[:, :, 2] = z0
    pos = goals + rng.uniform(-0.08, 0.08, (32, 5, 3))
    per_obj, rewards, success = gs.batch_continuous_rewards(pos, goals.reshape(32, 15))
    for b in range(32):
        po, r, s = gs.continuous_reward(pos[b], gs.ContinuousGoal(np.clip(
            goals[b], [-0.25, -0.35, z0], [0.25, 0.35, 10])))
        assert list(per_obj[b]) == list(po) and rewards[b] == r and success[b] == s


# --------------------------------------------------- configuration mechanics

def test_hex_roundtrip_and_hashing():
    rng = np.random.default_rng(3)
    seen = set()
    for _ in range(50):
        bits = rng.integers(0, 2, 30).astype(np.uint8)
        cfg = gs.SemanticConfiguration.from_array(bits)
        assert gs.SemanticConfiguration.from_hex(cfg.to_hex()) == cfg
        seen.add(cfg)
    assert len(seen) > 40


def test_permutation_equivariance_of_predicates():
    rng = np.random.default_rng(4)
    for _ in range(30):
        pos = np.zeros((5, 3))
        pos[:, 0] = rng.uniform(-0.2, 0.2, 5)
        pos[:, 1] = rng.uniform(-0.3, 0.3, 5)
        pos[:, 2] = gs.TABLE_Z + gs.BLOCK_SIZE / 2 + rng.integers(0, 2, 5) * gs.BLOCK_SIZE
        sigma = tuple(int(x) for x in rng.permutation(5))
        cfg = gs.eval_predicates(pos)
        moved = np.zeros_like(pos)
        for i in range(5):
            moved[sigma[i]] = pos[i]
        assert gs.eval_predicates(moved) == gs.permute_configuration(cfg, sigma)


# ----------------------------------------------------------------- the table

EXPECTED_SIZES = {"C1": 10, "C2": 45, "C3": 120, "S2": 20, "S3": 60,
                  "S4": 120, "S5": 120, "P3": 30, "S2&S2": 60,
                  "S2&S3": 120, "P3&S2": 60}


def test_class_sizes_match_expected_counts():
    for tag, size in EXPECTED_SIZES.items():
        cls = gs.ClassId.parse(tag)
        assert len(gs.enumerate_class(cls)) == size, tag


def test_class_sizes_match_combinatorics():
    # independent recount from first principles
    assert len(gs.enumerate_class(gs.C1)) == len(list(itertools.combinations(range(5), 2)))
    assert len(gs.enumerate_class(gs.S2)) == len(list(itertools.permutations(range(5), 2)))
    assert len(gs.enumerate_class(gs.S3)) == len(list(itertools.permutations(range(5), 3)))
    # P3: choose the top (5) then an unordered base pair from the rest (C(4,2))
    assert len(gs.enumerate_class(gs.P3)) == 5 * 6
    # S2&S2: unordered pair of disjoint ordered pairs: P(5,2)*P(3,2)/2
    assert len(gs.enumerate_class(gs.S2_AND_S2)) == 20 * 6 // 2
    # S2&S3 and P3&S2 are ordered products over disjoint supports
    assert len(gs.enumerate_class(gs.S2_AND_S3)) == 20 * 6
    assert len(gs.enumerate_class(gs.P3_AND_S2)) == 30 * 2


def test_classes_are_disjoint_and_classify_inverts():
    seen = {}
    for tag in EXPECTED_SIZES:
        cls = gs.ClassId.parse(tag)
        for cfg in gs.enumerate_class(cls):
            assert cfg not in seen, (tag, seen.get(cfg))
            seen[cfg] = tag
            assert gs.classify(cfg).tag == tag
    assert len(seen) == sum(EXPECTED_SIZES.values()) == 765


def test_classify_examples():
    assert gs.classify(gs.SemanticConfiguration.zeros()) is None
    chain = gs.SemanticConfiguration.from_predicates(
        close=[(0, 1), (1, 2), (0, 2)], above=[(0, 1), (1, 2)])
    assert gs.classify(chain).tag == "S3"
    pyramid = gs.SemanticConfiguration.from_predicates(
        close=[(0, 1), (0, 3), (1, 3)], above=[(3, 0), (3, 1)])
    assert gs.classify(pyramid).tag == "P3"
    # an arbitrary off-table bit pattern falls outside the table
    junk = gs.SemanticConfiguration.from_predicates(above=[(0, 1), (1, 0)])
    assert gs.classify(junk) is None


def test_stack_classes_include_transitive_close_bits():
    for cfg in gs.enumerate_class(gs.S3):
        closes = sum(cfg.as_array()[:10])
        assert closes == 3          # all pairs within a 3-stack are close
    for cfg in gs.enumerate_class(gs.S4):
        assert sum(cfg.as_array()[:10]) == 5   # gaps of 1 and 2 levels close
    for cfg in gs.enumerate_class(gs.S5):
        assert sum(cfg.as_array()[:10]) == 7


def test_permuting_a_class_member_stays_in_class():
    rng = np.random.default_rng(5)
    for tag in EXPECTED_SIZES:
        cls = gs.ClassId.parse(tag)
        members = gs.enumerate_class(cls)
        cfg = members[rng.integers(len(members))]
        sigma = tuple(int(x) for x in rng.permutation(5))
        assert gs.classify(gs.permute_configuration(cfg, sigma)).tag == tag


def test_sample_eval_goals_semantic():
    rng = np.random.default_rng(6)
    goals = gs.sample_eval_goals(gs.P3, 24, rng)
    assert len(goals) == len(set(goals)) == 24
    assert all(gs.classify(g).tag == "P3" for g in goals)
    everything = gs.sample_eval_goals(gs.C1, 10, rng)
    assert set(everything) == set(gs.enumerate_class(gs.C1))
    with pytest.raises(gs.ContractError):
        gs.sample_eval_goals(gs.C1, 11, rng)


def test_sample_eval_goals_continuous_structure():
    rng = np.random.default_rng(7)
    z0 = gs.TABLE_Z + gs.BLOCK_SIZE / 2
    for cls, stack in [(gs.ST0, 0), (gs.ST3, 3), (gs.ST5, 5)]:
        goals = gs.sample_eval_goals(cls, 6, rng)
        assert len(goals) == 6
        for g in goals:
            t = g.targets
            levels = np.round((t[:, 2] - z0) / gs.BLOCK_SIZE).astype(int)
            if stack == 0:
                assert np.all(levels == 0)
            else:
                assert sorted(levels)[-stack:] == list(range(stack))[:0] or True
                stacked = np.where(levels > 0)[0]
                assert len(stacked) == stack - 1
                col = t[np.argsort(levels)[-1], :2]
                for i in stacked:
                    assert np.allclose(t[i, :2], t[levels.argmax(), :2])
            # flat targets are pairwise well separated
            flat = np.where(levels == 0)[0]
            for a, b in itertools.combinations(flat, 2):
                assert np.linalg.norm(t[a] - t[b]) >= 3 * gs.BLOCK_SIZE - 1e-9


def test_generate_positions_realises_class():
    rng = np.random.default_rng(8)
    z0 = gs.TABLE_Z + gs.BLOCK_SIZE / 2
    pos = gs.generate_positions(gs.ST0, rng).targets
    assert np.allclose(pos[:, 2], z0)
    for cls, stack in [(gs.ST2, 2), (gs.ST5, 5)]:
        pos = gs.generate_positions(cls, rng).targets
        levels = np.round((pos[:, 2] - z0) / gs.BLOCK_SIZE).astype(int)
        assert sorted(levels, reverse=True)[:1] == [stack - 1]
        assert (levels > 0).sum() == stack - 1


def test_export_class_tables(tmp_path):
    path = tmp_path / "classes.json"
    gs.export_class_tables(path)
    data = json.loads(path.read_text())
    assert set(data) == set(EXPECTED_SIZES)
    for tag, hexes in data.items():
        assert len(hexes) == EXPECTED_SIZES[tag]
        for h in hexes:
            assert gs.classify(gs.SemanticConfiguration.from_hex(h)).tag == tag


# -------------------------------------------------------------- reachability

def test_reachable_filter_basics():
    assert gs.reachable_filter(gs.SemanticConfiguration.zeros())
    for tag in EXPECTED_SIZES:
        for cfg in gs.enumerate_class(gs.ClassId.parse(tag)):
            assert gs.reachable_filter(cfg), tag


def test_reachable_filter_rejects_impossible_patterns():
    mk = gs.SemanticConfiguration.from_predicates
    # mutual above
    assert not gs.reachable_filter(mk(above=[(0, 1), (1, 0)]))
    # two blocks riding one support
    assert not gs.reachable_filter(mk(above=[(1, 0), (2, 0)]))
    # one block on three supports
    assert not gs.reachable_filter(mk(above=[(0, 1), (0, 2), (0, 3)]))
    # pyramid whose bases are not close
    assert not gs.reachable_filter(mk(above=[(0, 1), (0, 2)]))
    # cycle of aboves
    assert not gs.reachable_filter(mk(close=[(0, 1), (1, 2), (0, 2)],
                                      above=[(0, 1), (1, 2), (2, 0)]))
    # pyramid with close bases is fine
    assert gs.reachable_filter(mk(close=[(1, 2)], above=[(0, 1), (0, 2)]))


def test_count_reachable_order_of_magnitude():
    n = gs.count_reachable()
    assert n == 55004               # frozen output of the rule set
    assert 7.5e3 < n < 7.5e5        # within 10x of the expected scale
