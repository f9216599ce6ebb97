"""Run configuration: one flat table of dotted keys, loadable from a text file.

File format, one assignment per line::

    # comment
    steps = 200000
    model.n_keys = 8
    loss.l3 = 0.05
    env.layout_file = layouts/maze.txt

Every key also exists as a command-line flag ``--<key>``; flags override the
file.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Callable

from idqn.env import LayoutConfig, load_layout
from idqn.errors import ConfigError
from idqn.losses import LossWeights
from idqn.model import ModelConfig
from idqn.trainer import TrainerConfig


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


def parse_conv_layers(s: str) -> tuple[tuple[int, int, int], ...]:
    """'8x4s2,16x3s2' -> ((8, 4, 2), (16, 3, 2)): filters x kernel s stride."""
    layers = []
    for part in s.split(","):
        part = part.strip().lower()
        if not part:
            continue
        f, rest = part.split("x")
        k, st = rest.split("s")
        layers.append((int(f), int(k), int(st)))
    if not layers:
        raise ValueError("need at least one conv layer")
    return tuple(layers)


def format_conv_layers(layers) -> str:
    return ",".join(f"{f}x{k}s{s}" for f, k, s in layers)


def parse_seeds(s: str) -> tuple[int, ...]:
    seeds = tuple(int(x) for x in s.replace(" ", "").split(",") if x)
    if not seeds:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seed in {s!r}")
    return seeds


@dataclasses.dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    fmt: Callable[[Any], str] = str


_M, _T, _L, _E = ModelConfig(), TrainerConfig(), LossWeights(), LayoutConfig()

SCHEMA: dict[str, Key] = {
    k.name: k
    for k in [
        Key("steps", int, _T.total_steps, "environment steps per training run"),
        Key("seeds", parse_seeds, (0, 1, 2), "comma-separated training seeds", lambda v: ",".join(map(str, v))),
        Key("out_dir", str, "runs/idqn", "directory receiving per-seed artifacts"),
        Key("model.n_keys", int, _M.n_keys, "keys per action (N)"),
        Key("model.embed_dim", int, _M.embed_dim, "embedding size (D)"),
        Key("model.v_min", float, _M.v_min, "lower end of the value range"),
        Key("model.v_max", float, _M.v_max, "upper end of the value range"),
        Key("model.conv_layers", parse_conv_layers, _M.conv_layers, "encoder convs as FxKsS list", format_conv_layers),
        Key("model.value_layout", str, _M.value_layout, "random_uniform or evenly_spaced"),
        Key("model.lambda_exp", float, _M.lambda_exp, "exploration factor on the uncertainty bonus"),
        Key("model.key_init_std", float, _M.key_init_std, "std of the normal key initialisation"),
        Key("train.gamma", float, _T.gamma, "discount factor"),
        Key("train.batch_size", int, _T.batch_size, "minibatch size"),
        Key("train.train_freq", int, _T.train_freq, "environment steps per gradient update"),
        Key("train.target_sync", int, _T.target_sync, "steps between target network syncs"),
        Key("train.lr", float, _T.lr, "Adam step size"),
        Key("train.beta1", float, _T.beta1, "Adam beta1"),
        Key("train.beta2", float, _T.beta2, "Adam beta2"),
        Key("train.adam_eps", float, _T.adam_eps, "Adam epsilon"),
        Key("train.weight_decay", float, _T.weight_decay, "L2 weight decay"),
        Key("train.clip_norm", float, _T.clip_norm, "global gradient-norm clip"),
        Key("train.buffer_size", int, _T.buffer_size, "replay capacity"),
        Key("train.learning_starts", int, _T.learning_starts, "steps collected before the first update"),
        Key("train.eval_interval", int, _T.eval_interval, "steps between evaluations (0 = off)"),
        Key("train.eval_episodes", int, _T.eval_episodes, "episodes per evaluation"),
        Key("train.epsilon", float, _T.epsilon, "epsilon-greedy rate (ablation; 0 = pure UCB)"),
        Key("train.env_seed", _opt_int, _T.env_seed, "layout seed (none = training seed)", lambda v: "none" if v is None else str(v)),
        Key("loss.l1", float, _L.l1, "weight of the Bellman loss"),
        Key("loss.l2", float, _L.l2, "weight of the distributional loss"),
        Key("loss.l3", float, _L.l3, "weight of the reconstruction loss"),
        Key("loss.l4", float, _L.l4, "weight of the diversity loss"),
        Key("env.width", int, _E.width, "grid columns"),
        Key("env.height", int, _E.height, "grid rows"),
        Key("env.n_pellets", int, _E.n_pellets, "seeded pellet count"),
        Key("env.cell_px", int, _E.cell_px, "pixels per grid cell"),
        Key("env.frames", int, _E.frames, "stacked frames per observation"),
        Key("env.step_cap", int, _E.step_cap, "episode step cap"),
        Key("env.layout_file", _opt_str, None, "text layout (overrides width/height/n_pellets)", lambda v: "none" if v is None else str(v)),
    ]
}


def defaults() -> dict[str, Any]:
    return {name: k.default for name, k in SCHEMA.items()}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key].parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def parse_config_text(text: str) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, val)
    return out


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    cfg = defaults()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        cfg.update(parse_config_text(text))
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = v
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {SCHEMA[k].fmt(cfg[k])}\n" for k in SCHEMA)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    trainer: TrainerConfig
    weights: LossWeights
    layout: LayoutConfig
    out_dir: Path
    seeds: tuple[int, ...]


def _section(cfg: dict[str, Any], prefix: str) -> dict[str, Any]:
    return {k[len(prefix) + 1 :]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def build_run_config(cfg: dict[str, Any]) -> RunConfig:
    """Validate the flat table and turn it into typed component configs."""
    env = _section(cfg, "env")
    layout_file = env.pop("layout_file")
    if layout_file is not None:
        try:
            layout = load_layout(layout_file, cell_px=env["cell_px"], frames=env["frames"], step_cap=env["step_cap"])
        except OSError as exc:
            raise ConfigError(f"env.layout_file: cannot read {layout_file}: {exc}") from exc
    else:
        layout = LayoutConfig(**env)
    model = ModelConfig(obs_shape=layout.obs_shape, n_actions=4, **_section(cfg, "model"))
    trainer = TrainerConfig(total_steps=cfg["steps"], **_section(cfg, "train"))
    weights = LossWeights(**_section(cfg, "loss"))
    seeds = tuple(cfg["seeds"])
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds: duplicate seed in {seeds}")
    return RunConfig(model, trainer, weights, layout, Path(cfg["out_dir"]), seeds)
