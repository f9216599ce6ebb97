"""Interpretability probes for a trained i-DQN: agreement, saliency, attention, exports, edits."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from idqn import autodiff as ad
from idqn.env import Action, EditCommand, GridState, LayoutConfig, PelletWorld, apply_edits, initial_state, write_pgm
from idqn.errors import ConfigError
from idqn.model import (
    IDQN,
    all_attention,
    encode,
    invert_all_keys,
    q_from_weights,
    select_action,
    u_from_weights,
    ucb_argmax,
)

# ---------------------------------------------------------------------------
# agreement between latent-space and image-space action choices


@dataclasses.dataclass
class AgreementResult:
    agreement: float
    per_rollout: list[float]
    matched: int
    total: int
    temperature: float


def cosine_rows(x: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Cosine similarity between flat vector ``x`` and every row of ``refs`` (0 where a norm vanishes)."""
    nx = np.linalg.norm(x)
    nr = np.linalg.norm(refs, axis=-1)
    denom = nx * nr
    dots = refs @ x
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def image_space_weights(obs: np.ndarray, key_images: np.ndarray, temperature: float) -> np.ndarray:
    """A×N softmax over cosine(obs, inverted key image) / temperature."""
    a, n = key_images.shape[:2]
    refs = key_images.reshape(a * n, -1)
    cos = cosine_rows(np.asarray(obs).reshape(-1), refs).reshape(a, n)
    return ad.softmax_np(cos / temperature)


def image_space_action(obs, key_images, values, lambda_exp: float, temperature: float) -> int:
    w = image_space_weights(obs, key_images, temperature)
    return int(ucb_argmax(q_from_weights(w, values), u_from_weights(w, values), lambda_exp))


def agreement(
    model: IDQN,
    env: PelletWorld,
    rollouts: int = 5,
    lambda_exp: float = 0.01,
    temperature: float = 0.1,
    env_seed: int = 0,
    max_steps: int | None = None,
    alt_policy: Callable[[np.ndarray, np.random.Generator], int] | None = None,
) -> AgreementResult:
    """Fraction of steps where the image-space action a' matches the latent action a.

    The environment is always stepped with the latent action.  ``alt_policy``
    replaces the image-space choice (used to calibrate against chance).
    """
    if rollouts < 1:
        raise ConfigError(f"rollouts must be >= 1, got {rollouts}")
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    key_images = invert_all_keys(model)
    per, matched, total = [], 0, 0
    for r in range(rollouts):
        rng = np.random.default_rng([env_seed, r])
        state, obs = env.reset(env_seed)
        hits = steps = 0
        done = False
        while not done and (max_steps is None or steps < max_steps):
            a, _ = select_action(model, obs, lambda_exp)
            if alt_policy is None:
                a_img = image_space_action(obs, key_images, model.values, lambda_exp, temperature)
            else:
                a_img = alt_policy(obs, rng)
            hits += int(a == a_img)
            steps += 1
            state, obs, _, done = env.step(state, a)
        per.append(hits / steps)
        matched += hits
        total += steps
    return AgreementResult(float(np.mean(per)), per, matched, total, temperature)


# ---------------------------------------------------------------------------
# perturbation saliency


@dataclasses.dataclass(frozen=True)
class SaliencyConfig:
    blur_sigma: float = 3.0
    mask_sigma: float = 2.0
    stride: int = 2
    amplitude: float = 1.0
    mask_radius: float | None = None  # truncate the Gaussian mask beyond this many pixels

    def __post_init__(self):
        if not (self.blur_sigma > 0 and self.mask_sigma > 0 and self.stride > 0):
            raise ConfigError("saliency blur_sigma, mask_sigma and stride must be positive")
        if not 0 <= self.amplitude <= 1:
            raise ConfigError(f"mask amplitude must lie in [0, 1], got {self.amplitude}")


def gaussian_mask(shape: tuple[int, int], center: tuple[int, int], cfg: SaliencyConfig) -> np.ndarray:
    ys, xs = np.ogrid[: shape[0], : shape[1]]
    d2 = (ys - center[0]) ** 2 + (xs - center[1]) ** 2
    m = cfg.amplitude * np.exp(-d2 / (2.0 * cfg.mask_sigma**2))
    if cfg.mask_radius is not None:
        m = np.where(d2 <= cfg.mask_radius**2, m, 0.0)
    return m


def perturb(obs: np.ndarray, blurred: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend the blurred observation in under ``mask`` (applied to every frame)."""
    return obs * (1.0 - mask) + blurred * mask


def blur(obs: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(np.asarray(obs, dtype=np.float64), sigma=(0, sigma, sigma), mode="nearest")


def _q_batch(model: IDQN, batch: np.ndarray, a: int, chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(batch), chunk):
        h = encode(model, batch[i : i + chunk])
        out.append(q_from_weights(all_attention(model, h)[:, a], model.values))
    return np.concatenate(out)


def saliency_map(model: IDQN, obs: np.ndarray, a: int, cfg: SaliencyConfig | None = None) -> np.ndarray:
    """H×W map of 0.5 * (Q(perturbed, a) - Q(obs, a))^2, sampled on a stride grid."""
    cfg = cfg or SaliencyConfig()
    obs = np.asarray(obs, dtype=np.float64)
    h, w = obs.shape[-2:]
    blurred = blur(obs, cfg.blur_sigma)
    ys = np.arange(0, h, cfg.stride)
    xs = np.arange(0, w, cfg.stride)
    batch = np.stack([perturb(obs, blurred, gaussian_mask((h, w), (i, j), cfg)) for i in ys for j in xs])
    q0 = _q_batch(model, obs[None], int(a))[0]
    # an unchanged image has zero saliency by definition; evaluating it in a
    # different batch shape can still differ from q0 in the last bit
    moved = np.any(batch != obs, axis=tuple(range(1, batch.ndim)))
    diff = np.zeros(len(batch))
    if moved.any():
        diff[moved] = _q_batch(model, batch[moved], int(a)) - q0
    grid = (0.5 * diff**2).reshape(len(ys), len(xs))
    iy = np.minimum((np.arange(h) + cfg.stride // 2) // cfg.stride, len(ys) - 1)
    ix = np.minimum((np.arange(w) + cfg.stride // 2) // cfg.stride, len(xs) - 1)
    return grid[np.ix_(iy, ix)]


# ---------------------------------------------------------------------------
# attention maps and exports


def attention_map(model: IDQN, obs: np.ndarray, cell_px: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """A×N attention weights and a heat-map image (darker = more attention, absolute 0..1 scale)."""
    w = all_attention(model, encode(model, obs))
    heat = np.kron(1.0 - w, np.ones((cell_px, cell_px)))
    return w, heat


@dataclasses.dataclass(frozen=True)
class AttentionStats:
    overlap: float  # mean off-diagonal entry of A A^T
    max_weight: float  # mean of each row's largest weight
    n_states: int


def attention_stats(model: IDQN, observations: Sequence[np.ndarray], lambda_exp: float = 0.0) -> AttentionStats:
    """Summaries of the attention rows the policy actually reads on ``observations``.

    Row b of A is the attention of the action selected in state b, the same
    row the diversity term sees for a replayed transition.
    """
    obs = np.stack(observations)
    if len(obs) < 2:
        raise ConfigError("attention_stats needs at least two observations")
    w = all_attention(model, encode(model, obs))
    q, u = q_from_weights(w, model.values), u_from_weights(w, model.values)
    acts = [ucb_argmax(q[b], u[b], lambda_exp) for b in range(len(obs))]
    rows = w[np.arange(len(obs)), acts]
    gram = rows @ rows.T
    b = len(rows)
    off = (gram.sum() - np.trace(gram)) / (b * (b - 1))
    return AttentionStats(float(off), float(rows.max(axis=1).mean()), b)


def export_embeddings(model: IDQN, observations: Sequence[np.ndarray], out: str | Path) -> Path:
    """CSV of state embeddings followed by every key: kind, action, key_index, h0..h{D-1}."""
    out = Path(out)
    d = model.config.embed_dim
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["kind", "action", "key_index"] + [f"h{i}" for i in range(d)])
        if len(observations):
            hs = encode(model, np.stack(observations))
            for h in hs:
                wr.writerow(["state", "", ""] + [repr(float(x)) for x in h])
        keys = model.keys.data
        for a in range(keys.shape[0]):
            for i in range(keys.shape[1]):
                wr.writerow(["key", a, i] + [repr(float(x)) for x in keys[a, i]])
    return out


def read_embeddings(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for row in rd:
            rows.append(
                {
                    "kind": row[0],
                    "action": int(row[1]) if row[1] else None,
                    "key_index": int(row[2]) if row[2] else None,
                    "h": np.array([float(x) for x in row[3:]]),
                }
            )
    return rows


def tile_frames(img: np.ndarray) -> np.ndarray:
    """K×H×W stack laid side by side as one H×(K·W) image."""
    img = np.asarray(img)
    return img[0] if img.shape[0] == 1 else np.concatenate(list(img), axis=1)


def key_filename(a: int, value: float) -> str:
    return f"act{a}_val{value:+.2f}.pgm"


def key_gallery(model: IDQN, out_dir: str | Path) -> list[Path]:
    """One PGM per (action, key) holding the decoded key, frames tiled horizontally."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = invert_all_keys(model)
    paths = []
    for a in range(images.shape[0]):
        for i in range(images.shape[1]):
            p = out_dir / key_filename(a, model.values[i])
            write_pgm(p, tile_frames(images[a, i]))
            paths.append(p)
    return paths


def artifact_energy(img: np.ndarray, palette: np.ndarray) -> float:
    """Mean distance from each pixel to the nearest renderer intensity."""
    img = np.asarray(img).reshape(-1, 1)
    return float(np.mean(np.min(np.abs(img - palette[None, :]), axis=1)))


# ---------------------------------------------------------------------------
# adversarial state edits


@dataclasses.dataclass
class Rollout:
    actions: list[int]
    rewards: list[float]
    positions: list[tuple[int, int]]
    attention: list[np.ndarray]
    start: GridState
    final: GridState


def rollout(model: IDQN, layout: LayoutConfig, start: GridState, steps: int, lambda_exp: float) -> Rollout:
    env = PelletWorld(layout)
    state, obs = env.reset_to(start)
    acts, rews, pos, attn = [], [], [state.agent], []
    done = False
    while not done and len(acts) < steps:
        a, diag = select_action(model, obs, lambda_exp)
        acts.append(a)
        attn.append(diag.w)
        state, obs, r, done = env.step(state, a)
        rews.append(r)
        pos.append(state.agent)
    return Rollout(acts, rews, pos, attn, start, state)


@dataclasses.dataclass
class ProbeReport:
    edits: list[EditCommand]
    base: Rollout
    edited: Rollout
    divergence_step: int | None
    added_pellets: dict[tuple[int, int], bool]

    @property
    def pellets_available(self) -> int:
        return len(self.edited.start.pellets)

    @property
    def pellets_cleared(self) -> int:
        return len(self.edited.start.pellets - self.edited.final.pellets)

    def format(self) -> str:
        def fmt_actions(acts):
            return " ".join(Action(a).name for a in acts)

        lines = [
            f"edits: {'; '.join(str(e) for e in self.edits) if self.edits else 'none'}",
            f"steps_base: {len(self.base.actions)}",
            f"steps_edited: {len(self.edited.actions)}",
            f"divergence: {'none' if self.divergence_step is None else self.divergence_step}",
            f"pellets_available: {self.pellets_available}",
            f"pellets_cleared: {self.pellets_cleared}",
            f"return_base: {sum(self.base.rewards):.1f}",
            f"return_edited: {sum(self.edited.rewards):.1f}",
        ]
        for cell, cleared in sorted(self.added_pellets.items()):
            lines.append(f"added_pellet {cell[0]} {cell[1]}: {'cleared' if cleared else 'uncleared'}")
        lines.append(f"actions_base: {fmt_actions(self.base.actions)}")
        lines.append(f"actions_edited: {fmt_actions(self.edited.actions)}")
        for t, w in enumerate(self.edited.attention):
            rows = "|".join(",".join(f"{x:.6f}" for x in row) for row in w)
            lines.append(f"attention[{t}]: {rows}")
        return "\n".join(lines) + "\n"


def first_divergence(a: Sequence[int], b: Sequence[int]) -> int | None:
    for t, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return t
    return None if len(a) == len(b) else min(len(a), len(b))


def adversarial_probe(
    model: IDQN,
    layout: LayoutConfig,
    edits: Sequence[EditCommand],
    steps: int,
    env_seed: int = 0,
    lambda_exp: float = 0.01,
) -> ProbeReport:
    """Run the trained policy from the base state and from its edited copy and compare."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    base_state = initial_state(env_seed, layout)
    edited_state = apply_edits(base_state, edits)
    base = rollout(model, layout, base_state, steps, lambda_exp)
    edited = rollout(model, layout, edited_state, steps, lambda_exp)
    added = edited_state.pellets - base_state.pellets
    added_status = {cell: cell not in edited.final.pellets for cell in added}
    return ProbeReport(list(edits), base, edited, first_divergence(base.actions, edited.actions), added_status)


def off_trajectory_cells(run: Rollout) -> list[tuple[int, int]]:
    """Empty cells next to (but never on) the path of ``run``, in row-major order."""
    visited = set(run.positions)
    st = run.start
    out = set()
    for r, c in visited:
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            cell = (r + dr, c + dc)
            if st.in_bounds(cell) and cell not in visited and cell not in st.walls and cell not in st.pellets:
                out.add(cell)
    return sorted(out)
