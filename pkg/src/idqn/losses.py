"""Training losses for i-DQN and the categorical projection onto fixed supports.

``total_loss`` assembles, per sampled batch::

    L = l1 * bellman + l2 * distributional + l3 * reconstruction + l4 * diversity

Bellman targets, the greedy next action and the next-state attention all come
from the target network and carry no gradient.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from idqn import autodiff as ad
from idqn.autodiff import Tensor
from idqn.errors import ConfigError, ContractError, DimensionError
from idqn.model import IDQN


@dataclasses.dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 0.05
    l4: float = 0.01

    def __post_init__(self):
        for name in ("l1", "l2", "l3", "l4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


@dataclasses.dataclass
class LossReport:
    bellman: float
    distributional: float
    reconstruction: float
    diversity: float
    total: float
    weights: LossWeights
    total_tensor: Tensor | None = dataclasses.field(default=None, repr=False)

    def recomposed(self) -> float:
        w = self.weights
        return w.l1 * self.bellman + w.l2 * self.distributional + w.l3 * self.reconstruction + w.l4 * self.diversity


class Batch(NamedTuple):
    obs: np.ndarray  # B×K×H×W
    actions: np.ndarray  # B ints
    rewards: np.ndarray  # B
    next_obs: np.ndarray  # B×K×H×W
    dones: np.ndarray  # B bools


# ---------------------------------------------------------------------------
# individual terms


def bellman_loss(q_sa: Tensor, target_y) -> Tensor:
    """Mean of (Q(s, a) - Y)^2; a single pair gives the plain squared error."""
    y = np.asarray(target_y.data if isinstance(target_y, Tensor) else target_y, dtype=np.float64)
    if q_sa.shape != y.shape:
        raise DimensionError(f"bellman_loss: q {q_sa.shape} vs target {y.shape}")
    diff = ad.sub(q_sa, y)
    return ad.mean(ad.mul(diff, diff))


def bellman_target(reward, gamma: float, next_q_max, done) -> np.ndarray:
    reward = np.asarray(reward, dtype=np.float64)
    return reward + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * np.asarray(next_q_max)


def project_distribution(next_w, reward, gamma: float, values, terminal) -> np.ndarray:
    """Map next-state mass through r + gamma*v and split it onto the supports.

    Each atom's mass lands at z = clip(r + gamma * v_j, v_1, v_N) (or clip(r)
    when terminal) and is shared between the bracketing supports
    v_k <= z <= v_{k+1} in proportion to proximity.  Works on one
    distribution (N) or a batch (B×N, with per-row reward/terminal).
    """
    p = np.asarray(next_w, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    b, n = p2.shape
    if v.shape != (n,):
        raise DimensionError(f"project_distribution: {n} atoms but {v.shape} supports")
    if np.any(np.diff(v) <= 0):
        raise ContractError("supports must be strictly increasing")
    ad.check_distribution(p2, "next-state distribution")
    r = np.broadcast_to(np.asarray(reward, dtype=np.float64), (b,))[:, None]
    term = np.broadcast_to(np.asarray(terminal, dtype=bool), (b,))[:, None]
    z = np.where(term, r, r + gamma * v[None, :])
    z = np.clip(z, v[0], v[-1])
    if n == 1:
        return np.ones_like(p)
    k = np.clip(np.searchsorted(v, z, side="right") - 1, 0, n - 2)
    lo, hi = v[k], v[k + 1]
    frac_hi = (z - lo) / (hi - lo)
    out = np.zeros((b, n))
    rows = np.repeat(np.arange(b)[:, None], n, axis=1)
    np.add.at(out, (rows, k), p2 * (1.0 - frac_hi))
    np.add.at(out, (rows, k + 1), p2 * frac_hi)
    return out[0] if single else out


def distributional_loss(current_w: Tensor, projected) -> Tensor:
    """Cross entropy of the current attention against the projected target, averaged over rows."""
    rows = 1 if current_w.ndim == 1 else current_w.shape[0]
    return ad.scale(ad.cross_entropy(projected, current_w), 1.0 / rows)


def reconstruction_loss(reconstructed: Tensor, original) -> Tensor:
    """Half the summed squared pixel error."""
    return ad.scale(ad.mse_sum(reconstructed, original), 0.5)


def diversity_loss(attn_batch: Tensor) -> Tensor:
    """Squared Frobenius norm of A A^T - I for a B×N batch of attention rows."""
    if attn_batch.ndim != 2:
        raise DimensionError(f"diversity_loss expects B×N, got {attn_batch.shape}")
    ad.check_distribution(attn_batch.data, "attention row")
    gram = ad.matmul(attn_batch, attn_batch.T)
    return ad.l2_frobenius(ad.sub(gram, np.eye(attn_batch.shape[0])))


# ---------------------------------------------------------------------------
# assembly


class Targets(NamedTuple):
    y: np.ndarray  # B bellman targets
    projected: np.ndarray  # B×N projected distributions
    next_action: np.ndarray  # B greedy next actions


def compute_targets(target_model: IDQN, batch: Batch, gamma: float) -> Targets:
    with ad.no_grad():
        h_next = target_model.encode(batch.next_obs).data
    w_next = ad.softmax_np(np.einsum("bd,and->ban", h_next, target_model.keys.data))
    q_next = w_next @ target_model.values
    a_star = np.argmax(q_next, axis=1)
    rows = np.arange(len(a_star))
    y = bellman_target(batch.rewards, gamma, q_next[rows, a_star], batch.dones)
    projected = project_distribution(w_next[rows, a_star], batch.rewards, gamma, target_model.values, batch.dones)
    return Targets(y, projected, a_star)


def total_loss(batch: Batch, model: IDQN, target_model: IDQN, weights: LossWeights, gamma: float) -> LossReport:
    """Weighted four-part loss; the result's ``total_tensor`` is ready for backward()."""
    b = len(batch.actions)
    if b == 0:
        raise ContractError("total_loss needs a non-empty batch")
    actions = np.asarray(batch.actions, dtype=np.int64)
    targets = compute_targets(target_model, batch, gamma)

    h = model.encode(batch.obs)
    w_all = model.attention(h)
    rows = np.arange(b)
    w_sa = w_all[rows, actions]
    q_sa = ad.matmul(w_sa, model.values[:, None]).reshape(b)

    l_bell = bellman_loss(q_sa, targets.y)
    l_dist = distributional_loss(w_sa, targets.projected)
    l_rec = ad.scale(reconstruction_loss(model.decode(h), batch.obs), 1.0 / b)
    l_div = ad.scale(diversity_loss(w_sa), 1.0 / b)

    total = (
        ad.scale(l_bell, weights.l1)
        + ad.scale(l_dist, weights.l2)
        + ad.scale(l_rec, weights.l3)
        + ad.scale(l_div, weights.l4)
    )
    return LossReport(
        bellman=l_bell.item(),
        distributional=l_dist.item(),
        reconstruction=l_rec.item(),
        diversity=l_div.item(),
        total=total.item(),
        weights=weights,
        total_tensor=total,
    )
