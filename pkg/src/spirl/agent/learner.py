"""Double-Q, n-step, prioritized-replay training on salient-patch sets, and evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..env.base import Env
from ..env.wrapper import FrameStack
from ..optim import AdamW, clip_grad_norm
from ..snapshot import load_snapshot, save_snapshot
from ..tensor import NonFiniteError
from .aggregator import AggregatorConfig
from .network import PolicyNetwork, act
from .pipeline import SaliencyPipeline
from .replay import NStepBuffer, PrioritizedReplay, double_q_bootstrap

log = logging.getLogger(__name__)

REGIMES = {
    "100K": dict(total_steps=100_000, buffer_capacity=100_000, steps_per_update=1, beta_steps=100_000),
    "400K": dict(total_steps=400_000, buffer_capacity=400_000, steps_per_update=4, beta_steps=400_000),
}

LOG_COLUMNS = ("step", "episode", "return", "loss", "epsilon", "beta", "k_mean")


@dataclass(frozen=True)
class AgentConfig:
    total_steps: int = 100_000
    buffer_capacity: int = 100_000
    steps_per_update: int = 1
    learning_starts: int = 1600
    batch_size: int = 32
    lr: float = 1e-4
    gamma: float = 0.99
    n_step: int = 20
    target_sync: int = 2000
    grad_clip: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_fraction: float = 0.2
    alpha: float = 0.5
    beta_start: float = 0.4
    beta_steps: int = 100_000
    eval_epsilon: float = 0.001
    stack: int = 4
    hidden: int = 256
    agg_dim: int = 32
    agg_heads: int = 8
    pooling: str = "cls"
    checkpoint_interval: int = 10_000
    seed: int = 0

    @classmethod
    def regime(cls, name: str, **overrides) -> "AgentConfig":
        if name not in REGIMES:
            raise ValueError(f"unknown regime {name!r}; expected one of {sorted(REGIMES)}")
        return cls(**{**REGIMES[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def epsilon(self, step: int) -> float:
        span = max(int(self.eps_fraction * self.total_steps), 1)
        frac = min(step / span, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def beta(self, step: int) -> float:
        frac = min(step / max(self.beta_steps, 1), 1.0)
        return self.beta_start + frac * (1.0 - self.beta_start)


@dataclass
class TrainResult:
    network: PolicyNetwork
    episode_returns: list[float]
    losses: list[float]
    updates: int
    checkpoints: list[str] = field(default_factory=list)


def build_network(config: AgentConfig, pipeline: SaliencyPipeline, n_actions: int, seed: int) -> PolicyNetwork:
    agg = AggregatorConfig(
        grid=pipeline.mae.config.frame.P,
        in_dim=pipeline.emb_dim,
        dim=config.agg_dim,
        heads=config.agg_heads,
        pooling=config.pooling,
        pad_mode=pipeline.pad_mode,
    )
    return PolicyNetwork(agg, n_actions, config.stack, config.hidden, seed=seed)


def _raw_reward(reward: float, info: dict) -> float:
    return float(info.get("raw_reward", reward))


class Learner:
    """Owns the online/target networks, the optimizer and the replay buffer."""

    def __init__(self, config: AgentConfig, pipeline: SaliencyPipeline, n_actions: int):
        self.config = config
        self.pipeline = pipeline
        self.online = build_network(config, pipeline, n_actions, seed=config.seed)
        self.target = build_network(config, pipeline, n_actions, seed=config.seed)
        self.target.load_state_arrays(self.online.state_arrays())
        self.params = self.online.named_parameters()
        self.opt = AdamW(self.params, config.lr, betas=(0.9, 0.999), weight_decay=0.0)
        self.replay = PrioritizedReplay(
            config.buffer_capacity, pipeline.slots, pipeline.emb_dim, config.n_step, config.stack, config.alpha
        )
        self.updates = 0
        self._discounts = config.gamma ** np.arange(config.n_step, dtype=np.float64)

    def sync_target(self) -> None:
        self.target.load_state_arrays(self.online.state_arrays())

    def targets(self, idx: np.ndarray) -> np.ndarray:
        cfg = self.config
        r = self.replay
        emb, pos = r.frames(r.next_states[idx])
        q_online = self.online.q_numpy(emb, pos).astype(np.float64)
        q_target = self.target.q_numpy(emb, pos).astype(np.float64)
        boot = double_q_bootstrap(q_online, q_target)
        disc = r.rewards[idx] @ self._discounts
        alive = ~r.terminals[idx]
        return disc + alive * cfg.gamma ** r.lengths[idx] * boot

    def update(self, beta: float, rng: np.random.Generator) -> float:
        cfg = self.config
        r = self.replay
        idx, weights = r.sample(cfg.batch_size, beta, rng)
        y = self.targets(idx)
        emb, pos = r.frames(r.states[idx])
        q = self.online.q_values(emb, pos)
        onehot = np.zeros(q.shape, dtype=q.dtype)
        onehot[np.arange(len(idx)), r.actions[idx]] = 1.0
        q_sa = T.sum(q * onehot, axis=-1)
        diff = q_sa - y.astype(q.dtype)
        loss = T.sum(diff * diff * (weights / len(idx)).astype(q.dtype))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(
                f"non-finite TD loss {value} at update {self.updates}: "
                f"|target| max {np.abs(y).max():.3g}, finite params {T.parameters_finite(self.params.values())}"
            )
        self.opt.zero_grad()
        loss.backward()
        clip_grad_norm(self.params, cfg.grad_clip)
        self.opt.step()
        r.update_priorities(idx, y - q_sa.data)
        self.updates += 1
        if self.updates % cfg.target_sync == 0:
            self.sync_target()
        return value


def save_agent(path: str | os.PathLike, learner: Learner, step: int, extra: dict | None = None) -> None:
    arrays = learner.online.state_arrays()
    arrays.update({f"target.{k}": v for k, v in learner.target.state_arrays().items()})
    save_snapshot(path, arrays)
    manifest = {
        "step": step,
        "updates": learner.updates,
        "config": learner.config.to_dict(),
        "config_hash": learner.config.digest(),
        "pipeline": {
            "knee_rule": learner.pipeline.knee_rule,
            "mr_pct": learner.pipeline.budget.mr_pct,
            "fixed_k": learner.pipeline.fixed_k,
            "pad_mode": learner.pipeline.pad_mode,
        },
        "n_actions": learner.online.n_actions,
    }
    manifest.update(extra or {})
    Path(path).with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_policy(path: str | os.PathLike, pipeline: SaliencyPipeline) -> tuple[PolicyNetwork, dict]:
    manifest = json.loads(Path(path).with_suffix(".json").read_text())
    config = AgentConfig(**manifest["config"])
    net = build_network(config, pipeline, manifest["n_actions"], seed=config.seed)
    net.load_state_arrays(load_snapshot(path))
    return net, manifest


def train(
    env: Env,
    pipeline: SaliencyPipeline,
    config: AgentConfig,
    out: str | os.PathLike | None = None,
    extra_manifest: dict | None = None,
) -> TrainResult:
    """Interact for ``config.total_steps`` wrapped env steps, learning after ``learning_starts``."""
    cfg = config
    learner = Learner(cfg, pipeline, env.action_count)
    rng = np.random.default_rng([cfg.seed, 1])
    replay = learner.replay
    nstep = NStepBuffer(cfg.n_step)
    stack = FrameStack(cfg.stack)
    out_dir = Path(out) if out is not None else None
    log_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "agent_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)

    def observe(frame) -> tuple[int, int]:
        pf = pipeline.process(frame)
        return replay.add_frame(pf.salient.embeddings, pf.salient.positions), pf.k

    episode = 0
    fid, k = observe(env.reset(cfg.seed * 1_000_003 + episode))
    state = np.array(stack.reset(fid))
    ep_return, ep_k = 0.0, [k]
    returns: list[float] = []
    losses: list[float] = []
    checkpoints: list[str] = []
    recent_losses: list[float] = []

    def greedy_q():
        emb, pos = replay.frames(state)
        return learner.online.q_numpy(emb, pos)

    try:
        for step in range(1, cfg.total_steps + 1):
            eps = cfg.epsilon(step - 1)
            a = act(greedy_q, eps, rng, env.action_count)
            frame, reward, done, info = env.step(a)
            ep_return += _raw_reward(reward, info)
            fid, k = observe(frame)
            ep_k.append(k)
            next_state = np.array(stack.push(fid))
            for tr in nstep.push(state, a, reward, next_state, done):
                replay.push(tr)
            state = next_state

            if step >= cfg.learning_starts and step % cfg.steps_per_update == 0 and len(replay):
                loss = learner.update(cfg.beta(step), rng)
                losses.append(loss)
                recent_losses.append(loss)

            if done:
                returns.append(ep_return)
                if writer is not None:
                    mean_loss = float(np.mean(recent_losses)) if recent_losses else float("nan")
                    writer.writerow([step, episode, ep_return, mean_loss, eps, cfg.beta(step), float(np.mean(ep_k))])
                    log_fh.flush()
                recent_losses = []
                episode += 1
                nstep.clear()
                fid, k = observe(env.reset(cfg.seed * 1_000_003 + episode))
                state = np.array(stack.reset(fid))
                ep_return, ep_k = 0.0, [k]

            if out_dir is not None and step % cfg.checkpoint_interval == 0:
                path = out_dir / f"agent_step_{step:07d}.spnt"
                save_agent(path, learner, step, extra_manifest)
                checkpoints.append(str(path))
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_dir is not None:
        path = out_dir / "agent_final.spnt"
        save_agent(path, learner, cfg.total_steps, extra_manifest)
        checkpoints.append(str(path))
    return TrainResult(learner.online, returns, losses, learner.updates, checkpoints)


@dataclass
class EvalStats:
    returns: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def median(self) -> float:
        return float(np.median(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "std": self.std, "returns": self.returns}


EVAL_SEED_BASE = 7_000_000


def evaluate(
    env: Env,
    policy: PolicyNetwork | None,
    pipeline: SaliencyPipeline | None,
    episodes: int = 50,
    epsilon: float = 0.001,
    seed: int = 0,
) -> EvalStats:
    """Raw (unclipped) returns over ``episodes`` episodes with distinct seeds.

    ``policy=None`` plays uniformly at random.
    """
    rng = np.random.default_rng([seed, 2])
    returns = []
    for ep in range(episodes):
        frame = env.reset(EVAL_SEED_BASE + seed * 10_000 + ep)
        stack = FrameStack(policy.stack if policy is not None else 1)
        sets = stack.reset(pipeline.process(frame).salient if policy is not None else None)
        total, done = 0.0, False
        while not done:
            if policy is None:
                a = int(rng.integers(0, env.action_count))
            else:
                emb = np.stack([s.embeddings for s in sets])
                pos = np.stack([s.positions for s in sets])
                a = act(lambda: policy.q_numpy(emb, pos), epsilon, rng, env.action_count)
            frame, reward, done, info = env.step(a)
            total += _raw_reward(reward, info)
            if policy is not None and not done:
                sets = stack.push(pipeline.process(frame).salient)
        returns.append(total)
    return EvalStats(returns)
