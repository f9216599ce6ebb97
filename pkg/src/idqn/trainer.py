"""Replay buffer, Adam, target network and the end-to-end i-DQN training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from idqn import autodiff as ad
from idqn.env import GridState, LayoutConfig, PelletWorld
from idqn.errors import ConfigError, ContractError
from idqn.losses import Batch, LossReport, LossWeights, total_loss
from idqn.model import IDQN, ModelConfig, select_action

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "episode", "return", "bellman", "distrib", "reconstruct", "diversity", "total", "grad_scale")
EVAL_FIELDS = ("step", "mean_return", "min_return", "max_return")


@dataclasses.dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.9
    batch_size: int = 32
    train_freq: int = 4
    target_sync: int = 1000
    lr: float = 0.00025
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 10.0
    buffer_size: int = 10_000
    learning_starts: int = 1000
    total_steps: int = 200_000
    eval_interval: int = 0
    eval_episodes: int = 100
    epsilon: float = 0.0
    env_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ("batch_size", "train_freq", "target_sync", "buffer_size", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "clip_norm", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.total_steps < 0 or self.learning_starts < 0 or self.eval_interval < 0 or self.weight_decay < 0:
            raise ConfigError("total_steps, learning_starts, eval_interval and weight_decay must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.batch_size > self.buffer_size:
            raise ConfigError("batch_size cannot exceed buffer_size")


# ---------------------------------------------------------------------------
# replay


class Transition(NamedTuple):
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, obs_shape: tuple[int, ...]):
        if capacity < 1:
            raise ConfigError(f"replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.obs = np.zeros((capacity,) + self.obs_shape)
        self.next_obs = np.zeros((capacity,) + self.obs_shape)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        if not np.isfinite(t.reward):
            raise ContractError(f"non-finite reward {t.reward}")
        if np.shape(t.obs) != self.obs_shape or np.shape(t.next_obs) != self.obs_shape:
            raise ContractError(f"transition observations must have shape {self.obs_shape}")
        i = self.cursor
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.actions[i] = int(t.action)
        self.rewards[i] = float(t.reward)
        self.dones[i] = bool(t.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def get(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        """Uniform draw of ``k`` distinct stored transitions."""
        if k > self.size:
            raise ContractError(f"cannot sample {k} transitions from a buffer holding {self.size}")
        return self.get(rng.choice(self.size, size=k, replace=False))


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, lr: float = 0.00025, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainerConfig) -> "Adam":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def step(self, params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, optimizer: Adam) -> None:
    optimizer.step(params)


def sync_target(model: IDQN, target_model: IDQN) -> None:
    target_model.load_from(model)


def train_step(
    model: IDQN,
    target_model: IDQN,
    batch: Batch,
    cfg: TrainerConfig,
    weights: LossWeights,
    optimizer: Adam,
) -> tuple[LossReport, float]:
    """One gradient update on ``batch``; returns the loss report and the clip scale applied."""
    model.zero_grad()
    report = total_loss(batch, model, target_model, weights, cfg.gamma)
    ad.backward(report.total_tensor)
    params = model.parameters()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    scale = ad.clip_gradients_by_global_norm(params, cfg.clip_norm)
    optimizer.step(params)
    report.total_tensor = None
    return report, scale


# ---------------------------------------------------------------------------
# evaluation


def run_episode(model: IDQN, env: PelletWorld, lambda_exp: float, seed: int = 0, start: GridState | None = None) -> float:
    state, obs = env.reset(seed) if start is None else env.reset_to(start)
    total, done = 0.0, False
    while not done:
        a, _ = select_action(model, obs, lambda_exp)
        state, obs, r, done = env.step(state, a)
        total += r
    return total


def evaluate(model: IDQN, env: PelletWorld, episodes: int, lambda_exp: float, seed: int = 0) -> tuple[float, list[float]]:
    """Run the greedy-plus-bonus policy without learning; returns (mean, per-episode returns)."""
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    returns = [run_episode(model, env, lambda_exp, seed) for _ in range(episodes)]
    return float(np.mean(returns)), returns


# ---------------------------------------------------------------------------
# training loop


@dataclasses.dataclass
class Checkpoint:
    model_config: ModelConfig
    trainer_config: TrainerConfig
    weights: LossWeights
    layout: LayoutConfig
    model: IDQN
    optimizer: Adam
    step: int = 0
    episode: int = 0
    seed: int = 0
    rng_state: dict | None = None

    @property
    def env_seed(self) -> int:
        return self.seed if self.trainer_config.env_seed is None else self.trainer_config.env_seed


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsLog:
    """Append-only CSV with a fixed header; also kept in memory as rows of strings."""

    def __init__(self, fields, path: str | Path | None = None):
        self.fields = tuple(fields)
        self.rows: list[list[str]] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(self.fields)

    def append(self, **values) -> None:
        row = [_fmt(values.get(f)) for f in self.fields]
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.fields)
        w.writerows(self.rows)
        return buf.getvalue()


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    target_model: IDQN
    metrics: MetricsLog
    evals: MetricsLog
    episode_returns: list[float]


def train(
    layout: LayoutConfig,
    cfg: TrainerConfig,
    weights: LossWeights,
    seed: int,
    model_config: ModelConfig | None = None,
    metrics_path: str | Path | None = None,
    eval_path: str | Path | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Collect experience with the UCB policy and train every ``train_freq`` steps."""
    env = PelletWorld(layout)
    if model_config is None:
        model_config = ModelConfig(obs_shape=layout.obs_shape, n_actions=env.n_actions)
    if model_config.obs_shape != layout.obs_shape:
        raise ConfigError(f"model obs_shape {model_config.obs_shape} != environment {layout.obs_shape}")
    model = IDQN.init(model_config, seed)
    target = model.copy()
    optimizer = Adam.from_config(cfg)
    rng = np.random.default_rng([seed, 1])
    buffer = ReplayBuffer(cfg.buffer_size, layout.obs_shape)
    env_seed = seed if cfg.env_seed is None else cfg.env_seed
    lam = model_config.lambda_exp

    metrics = MetricsLog(METRIC_FIELDS, metrics_path)
    evals = MetricsLog(EVAL_FIELDS, eval_path)
    returns: list[float] = []
    state, obs = env.reset(env_seed)
    episode, ep_return = 0, 0.0
    try:
        for t in range(1, cfg.total_steps + 1):
            if cfg.epsilon > 0 and rng.random() < cfg.epsilon:
                a = int(rng.integers(env.n_actions))
            else:
                a, _ = select_action(model, obs, lam)
            state, next_obs, r, done = env.step(state, a)
            buffer.push(Transition(obs, a, r, next_obs, done))
            ep_return += r
            obs = next_obs

            if t % cfg.train_freq == 0 and t >= cfg.learning_starts and len(buffer) >= cfg.batch_size:
                batch = buffer.sample(cfg.batch_size, rng)
                rep, scale = train_step(model, target, batch, cfg, weights, optimizer)
                metrics.append(
                    step=t,
                    episode=episode,
                    bellman=rep.bellman,
                    distrib=rep.distributional,
                    reconstruct=rep.reconstruction,
                    diversity=rep.diversity,
                    total=rep.total,
                    grad_scale=scale,
                )
            if t % cfg.target_sync == 0:
                sync_target(model, target)
            if done:
                metrics.append(step=t, episode=episode, **{"return": ep_return})
                returns.append(ep_return)
                if progress is not None:
                    progress(t, ep_return)
                episode += 1
                ep_return = 0.0
                state, obs = env.reset(env_seed)
            if cfg.eval_interval and t % cfg.eval_interval == 0:
                mean_r, rets = evaluate(model, PelletWorld(layout), cfg.eval_episodes, lam, env_seed)
                evals.append(step=t, mean_return=mean_r, min_return=min(rets), max_return=max(rets))
                log.info("step %d eval mean return %.3f", t, mean_r)
    finally:
        metrics.close()
        evals.close()

    ckpt = Checkpoint(
        model_config=model_config,
        trainer_config=cfg,
        weights=weights,
        layout=layout,
        model=model,
        optimizer=optimizer,
        step=cfg.total_steps,
        episode=episode,
        seed=seed,
        rng_state=rng.bit_generator.state,
    )
    return TrainResult(ckpt, target, metrics, evals, returns)
