"""Run orchestration: configuration, evaluation protocol, transfer
scenarios, metrics persistence, and reporting.

A run trains one agent for a number of epochs (nb_cycles training cycles
each), evaluating after every epoch on 24 goals per evaluation class with
a deterministic policy and standard flat resets.  Metrics go to one JSON
object per line; checkpoints are npz archives that can be reloaded to
reproduce their epoch's evaluation exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autotelic import AutotelicTrainer, goal_array, run_wave
from .blockworld import EPISODE_LIMIT, BlockWorld
from .goalspace import (CONTINUOUS_CLASSES, N_OBJECTS, P3, P3_AND_S2, S2_AND_S2,
                        S2_AND_S3, S3, SEMANTIC_CLASSES, SemanticConfiguration,
                        enumerate_class, sample_eval_goals)
from .graphnet import KINDS
from .numcore import ContractError
from .sac import NeuralPolicy, SacAgent, SacConfig


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs, hyperparameters under their
    standard names plus architecture, ablation, and transfer switches."""
    kind: str = "GN"
    goal_mode: str = "semantic"
    nb_mpis: int = 24
    nb_cycles: int = 50
    nb_rollouts_per_mpi: int = 2
    rollouts_length: int = 200
    nb_updates: int = 30
    replay_strategy: str = "future"
    k_replay: int = 4
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.95
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    alpha: float = 0.2
    biased_init: float = 0.2
    self_eval_curriculum: float = 0.1
    curriculum_queue_length: int = 1000
    hidden: int = 256
    readout_hidden: int = 256
    buffer_episodes: int = 5000
    n_epochs: int = 10
    eval_goals_per_class: int = 24
    no_attention: bool = False
    no_curriculum: bool = False
    no_biased_init: bool = False
    scenario: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown architecture {self.kind!r}")
        if self.goal_mode not in ("semantic", "continuous"):
            raise ContractError(f"bad goal_mode {self.goal_mode!r}")
        if self.scenario not in (None, 1, 2, 3):
            raise ContractError(f"scenario must be 1, 2 or 3")
        if self.scenario is not None and self.goal_mode != "semantic":
            raise ContractError("transfer scenarios are semantic-only")
        if self.replay_strategy != "future":
            raise ContractError("only the future replay strategy exists")
        for name in ("nb_mpis", "nb_cycles", "nb_rollouts_per_mpi",
                     "rollouts_length", "nb_updates", "k_replay",
                     "batch_size", "curriculum_queue_length", "hidden",
                     "readout_hidden", "buffer_episodes", "n_epochs",
                     "eval_goals_per_class"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be a positive integer")
        for name in ("biased_init", "self_eval_curriculum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be a probability")
        for name in ("gamma", "tau"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.lr_actor <= 0 or self.lr_critic <= 0 or self.alpha < 0:
            raise ContractError("bad optimizer constants")

    @property
    def semantic(self) -> bool:
        return self.goal_mode == "semantic"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ContractError("config file must hold a flat object")
        known = set(cls.__dataclass_fields__)
        stray = sorted(set(data) - known)
        if stray:
            raise ContractError(f"unknown config keys: {', '.join(stray)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        """Fingerprint of every field that shapes the agent or the data
        it trains on.  n_epochs stays out so a checkpoint can resume
        into a longer run."""
        data = asdict(self)
        del data["n_epochs"]
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        data = asdict(self)
        data.update(changes)
        return RunConfig(**data)


def desk_config(kind: str = "RN", goal_mode: str = "semantic",
                **overrides) -> RunConfig:
    """Laptop-scale preset: 4 workers, slim attention-free networks,
    short rollouts, and biased resets.

    Biased resets are load-bearing at this scale: flat resets separate the
    blocks by more than the close threshold, so a fresh stochastic policy
    can run hundreds of episodes without flipping a single predicate bit
    and the discovered-goal set never grows.
    """
    base = dict(kind=kind, goal_mode=goal_mode, nb_mpis=4, nb_cycles=10,
                nb_rollouts_per_mpi=3, rollouts_length=100, nb_updates=50,
                hidden=32, readout_hidden=32, batch_size=64,
                buffer_episodes=2000, n_epochs=10, biased_init=0.2,
                no_attention=True)
    base.update(overrides)
    return RunConfig(**base)


def build_agent(config: RunConfig) -> SacAgent:
    sac_cfg = SacConfig(gamma=config.gamma, tau=config.tau,
                        alpha=config.alpha, lr_actor=config.lr_actor,
                        lr_critic=config.lr_critic)
    return SacAgent(config.kind, semantic=config.semantic,
                    hidden=config.hidden,
                    readout_hidden=config.readout_hidden,
                    attention=not config.no_attention, equalize=True,
                    config=sac_cfg, seed=config.seed)


# ---------------------------------------------------------------------------
# transfer scenarios


def contains_chain3(cfg: SemanticConfiguration) -> bool:
    """True when some block sits above another that itself sits above a
    third: the signature of a stack of three or more."""
    for mid in range(N_OBJECTS):
        has_upper = any(cfg.above(i, mid)
                        for i in range(N_OBJECTS) if i != mid)
        has_lower = any(cfg.above(mid, k)
                        for k in range(N_OBJECTS) if k != mid)
        if has_upper and has_lower:
            return True
    return False


def contains_pyramid(cfg: SemanticConfiguration) -> bool:
    """True when one block rests on two distinct supports (their bases
    are necessarily close at these tolerances)."""
    for top in range(N_OBJECTS):
        supports = [b for b in range(N_OBJECTS)
                    if b != top and cfg.above(top, b)]
        if len(supports) >= 2:
            return True
    return False


class PatternHeldout:
    """Goal collection defined by a containment predicate."""

    def __init__(self, predicate, label: str):
        self.predicate = predicate
        self.label = label

    def __contains__(self, cfg) -> bool:
        return bool(self.predicate(cfg))

    def __repr__(self):
        return f"PatternHeldout({self.label})"


def transfer_setup(scenario: int):
    """Held-out goal collection and the classes tested on it."""
    if scenario == 1:
        heldout = frozenset(enumerate_class(S2_AND_S2)
                            ) | frozenset(enumerate_class(S2_AND_S3)
                                          ) | frozenset(
                                              enumerate_class(P3_AND_S2))
        return heldout, (S2_AND_S2, S2_AND_S3, P3_AND_S2)
    if scenario == 2:
        return PatternHeldout(contains_pyramid, "pyramid"), (P3, P3_AND_S2)
    if scenario == 3:
        return PatternHeldout(contains_chain3, "chain3"), (S3,)
    raise ContractError(f"unknown scenario {scenario!r}")


def audit_episodes(episodes, heldout) -> int:
    """Count stored steps whose achieved configuration is held out."""
    bad = 0
    for ep in episodes:
        for bits in ep.achieved:
            if SemanticConfiguration.from_array(bits) in heldout:
                bad += 1
    return bad


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsRecord:
    epoch: int
    per_class: dict
    global_sr: float
    n_discovered: int
    wall_clock: float = 0.0

    def to_line(self) -> str:
        # wall clock stays out so equal-seed runs write identical files
        return json.dumps({"epoch": self.epoch, "per_class": self.per_class,
                           "global_sr": self.global_sr,
                           "n_discovered": self.n_discovered},
                          sort_keys=True)


def _eval_goals(class_id, k: int, rng):
    """k goals; small semantic classes are padded with repeats so every
    class contributes the same number of evaluation episodes."""
    if class_id.continuous:
        return sample_eval_goals(class_id, k, rng)
    members = enumerate_class(class_id)
    if k <= len(members):
        return sample_eval_goals(class_id, k, rng)
    extra = rng.choice(len(members), size=k - len(members), replace=True)
    return list(members) + [members[i] for i in extra]


def evaluate(policy, classes=None, k: int = 24, seed=0, epoch: int = 0,
             n_discovered: int = 0,
             episode_length: int = EPISODE_LIMIT) -> MetricsRecord:
    """Deterministic rollouts on k goals per class from flat resets.

    policy is either an agent (wrapped in a deterministic controller) or
    any object speaking the wave protocol, e.g. the scripted oracle.
    """
    t0 = time.perf_counter()
    if isinstance(policy, SacAgent):
        controller = NeuralPolicy(policy, deterministic=True)
        if classes is None:
            classes = SEMANTIC_CLASSES if policy.semantic \
                else CONTINUOUS_CLASSES
        flatten = True
    else:
        controller = policy
        if classes is None:
            raise ContractError("explicit classes required for controllers")
        flatten = False
    rng = np.random.default_rng(seed)
    per_class = {}
    for cls in classes:
        goals = _eval_goals(cls, k, rng)
        envs = [BlockWorld(seed=rng.integers(2 ** 31) + i)
                for i in range(len(goals))]
        payload = [goal_array(g) for g in goals] if flatten else goals
        _, success = run_wave(envs, controller, payload, episode_length,
                              biased_init=0.0, stop_when_done=True)
        per_class[cls.tag] = float(success.mean())
    return MetricsRecord(epoch, per_class,
                         float(np.mean(list(per_class.values()))),
                         n_discovered, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# full runs


def run(config: RunConfig, out_dir, resume=None, log=None) -> list:
    """Train, evaluating and checkpointing once per epoch.

    resume: checkpoint path; its epoch is re-evaluated without training
    (byte-identical metrics line), then training continues with a fresh
    replay buffer.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json(), encoding="utf-8")
    heldout = None
    if config.scenario is not None:
        heldout, _ = transfer_setup(config.scenario)
    first_epoch = 1
    resume_extra = None
    if resume is not None:
        agent, resume_extra = SacAgent.load(resume)
        if resume_extra.get("config_digest") not in (None, config.digest()):
            raise ContractError("checkpoint belongs to a different config")
        first_epoch = int(resume_extra["epoch"])
    else:
        agent = build_agent(config)
    trainer = AutotelicTrainer(agent, config, heldout=heldout)
    records = []
    with open(out / "metrics.jsonl", "a", encoding="utf-8") as metrics:
        for epoch in range(first_epoch, config.n_epochs + 1):
            fresh = resume is None or epoch > first_epoch
            if fresh:
                for _ in range(config.nb_cycles):
                    trainer.run_cycle()
                agent.save(out / f"checkpoint_{epoch:04d}.npz",
                           extra_meta={"epoch": epoch,
                                       "config_digest": config.digest(),
                                       "n_discovered":
                                           len(trainer.discovered)})
                n_disc = len(trainer.discovered)
            else:
                n_disc = int(resume_extra["n_discovered"])
            rec = evaluate(agent, k=config.eval_goals_per_class,
                           seed=(config.seed, epoch), epoch=epoch,
                           n_discovered=n_disc)
            records.append(rec)
            metrics.write(rec.to_line() + "\n")
            metrics.flush()
            if log is not None:
                log(f"epoch {epoch}: global_sr={rec.global_sr:.3f} "
                    f"discovered={rec.n_discovered} "
                    f"eval_time={rec.wall_clock:.1f}s")
    return records


# ---------------------------------------------------------------------------
# reporting


class MetricsParseError(ContractError):
    pass


def load_metrics(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsParseError(
                    f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "per_class" not in obj \
                    or "epoch" not in obj or "global_sr" not in obj:
                raise MetricsParseError(
                    f"{path}:{lineno}: missing metrics fields")
            rows.append(obj)
    if not rows:
        raise MetricsParseError(f"{path}: empty metrics file")
    return rows


def report(paths, csv_path=None, json_path=None) -> dict:
    """Aggregate one or more metrics files into per-class tables.

    Returns {"classes", "epochs", "rows"} where each row carries the
    cross-seed mean and standard deviation of one class (or the global
    average) at one epoch.  Optional CSV (header epoch,class,sr) and JSON
    dumps mirror the rows.
    """
    if not paths:
        raise ContractError("need at least one metrics file")
    runs = [load_metrics(p) for p in paths]
    classes = sorted(runs[0][0]["per_class"])
    epochs = sorted({row["epoch"] for run in runs for row in run})
    rows = []
    for epoch in epochs:
        found = [row for run in runs for row in run if row["epoch"] == epoch]
        for cls in classes:
            vals = np.array([row["per_class"][cls] for row in found])
            rows.append({"epoch": epoch, "class": cls,
                         "sr": float(vals.mean()),
                         "std": float(vals.std()), "n_seeds": len(vals)})
        gl = np.array([row["global_sr"] for row in found])
        rows.append({"epoch": epoch, "class": "global",
                     "sr": float(gl.mean()), "std": float(gl.std()),
                     "n_seeds": len(gl)})
    summary = {"classes": classes, "epochs": epochs, "rows": rows}
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "class", "sr"])
            for row in rows:
                writer.writerow([row["epoch"], row["class"], row["sr"]])
    if json_path is not None:
        Path(json_path).write_text(json.dumps(summary, indent=1),
                                   encoding="utf-8")
    return summary
