"""The i-DQN network: conv encoder, per-action key-value attention head, deconv decoder.

Q-values are read out of a fixed set of value supports::

    w[a, i] = softmax_i(h . key[a, i])
    Q(s, a) = sum_i w[a, i] * v[i]
    U(s, a) = sqrt(sum_i w[a, i] * v[i]**2 - Q(s, a)**2)

and actions are picked by ``argmax_a Q + lambda_exp * U`` with ties going to
the lowest action index.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple, Sequence

import numpy as np

from idqn import autodiff as ad
from idqn.autodiff import Parameter, Tensor
from idqn.errors import ConfigError, ContractError, DimensionError

ConvSpec = tuple[int, int, int]  # (filters, kernel, stride)

VALUE_LAYOUTS = ("random_uniform", "evenly_spaced")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    obs_shape: tuple[int, int, int] = (2, 32, 32)
    n_actions: int = 4
    n_keys: int = 8
    embed_dim: int = 64
    v_min: float = -25.0
    v_max: float = 25.0
    conv_layers: tuple[ConvSpec, ...] = ((8, 4, 2), (16, 3, 2))
    value_layout: str = "random_uniform"
    lambda_exp: float = 0.01
    key_init_std: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "obs_shape", tuple(int(x) for x in self.obs_shape))
        object.__setattr__(self, "conv_layers", tuple(tuple(int(x) for x in c) for c in self.conv_layers))
        if self.n_keys < 2:
            raise ConfigError(f"n_keys must be >= 2, got {self.n_keys}")
        if self.n_actions < 1:
            raise ConfigError(f"n_actions must be >= 1, got {self.n_actions}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.v_min < self.v_max:
            raise ConfigError(f"need v_min < v_max, got ({self.v_min}, {self.v_max})")
        if self.value_layout not in VALUE_LAYOUTS:
            raise ConfigError(f"value_layout must be one of {VALUE_LAYOUTS}, got {self.value_layout!r}")
        if self.lambda_exp < 0:
            raise ConfigError(f"lambda_exp must be >= 0, got {self.lambda_exp}")
        if self.key_init_std < 0:
            raise ConfigError(f"key_init_std must be >= 0, got {self.key_init_std}")
        if len(self.obs_shape) != 3:
            raise ConfigError(f"obs_shape must be (frames, H, W), got {self.obs_shape}")
        self.feature_shapes()

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """Activation shapes from the observation through every conv layer.

        Raises ConfigError when a layer leaves a remainder, since the mirrored
        decoder could then not reproduce the observation shape.
        """
        shapes = [self.obs_shape]
        c, h, w = self.obs_shape
        for f, k, s in self.conv_layers:
            if min(f, k, s) < 1:
                raise ConfigError(f"conv layer {(f, k, s)} has a non-positive entry")
            if h < k or w < k:
                raise ConfigError(f"conv kernel {k} larger than feature map {h}×{w}")
            if (h - k) % s or (w - k) % s:
                raise ConfigError(
                    f"conv layer {(f, k, s)} on {h}×{w} leaves a remainder; "
                    "the decoder could not reproduce the observation shape"
                )
            c, h, w = f, (h - k) // s + 1, (w - k) // s + 1
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_features(self) -> int:
        c, h, w = self.feature_shapes()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        d["conv_layers"] = [list(c) for c in self.conv_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["obs_shape"] = tuple(d["obs_shape"])
        d["conv_layers"] = tuple(tuple(c) for c in d["conv_layers"])
        return cls(**d)


def sample_values(config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    """Fixed value supports, sorted ascending, strictly inside (v_min, v_max)."""
    n, lo, hi = config.n_keys, config.v_min, config.v_max
    if config.value_layout == "evenly_spaced":
        return lo + (np.arange(n) + 0.5) * (hi - lo) / n
    while True:
        v = np.sort(rng.uniform(lo, hi, size=n))
        if v[0] > lo and np.all(np.diff(v) > 0):
            return v


def _xavier(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class IDQN:
    """Parameters plus fixed value supports; forward passes work on batches."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter], values: np.ndarray):
        self.config = config
        self.params = params
        self.values = np.asarray(values, dtype=np.float64)
        self.values.setflags(write=False)
        self._check()

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "IDQN":
        rng = np.random.default_rng(seed)
        values = sample_values(config, rng)
        shapes = config.feature_shapes()
        params: dict[str, Parameter] = {}

        def add(name, data):
            params[name] = Parameter(data, name)

        for i, (f, k, _s) in enumerate(config.conv_layers):
            c = shapes[i][0]
            add(f"enc.conv{i}.w", _xavier(rng, (f, c, k, k), c * k * k, f * k * k))
            add(f"enc.conv{i}.b", np.zeros(f))
        flat, d = config.flat_features, config.embed_dim
        add("enc.fc.w", rng.normal(0.0, 0.1, size=(flat, d)))
        add("enc.fc.b", np.zeros(d))
        add("store.keys", rng.normal(0.0, config.key_init_std, size=(config.n_actions, config.n_keys, d)))
        add("dec.fc.w", rng.normal(0.0, 0.1, size=(d, flat)))
        add("dec.fc.b", np.zeros(flat))
        # deconv i maps conv i's output back to its input; weights share conv layout F×C×k×k
        for i in reversed(range(len(config.conv_layers))):
            f, k, _s = config.conv_layers[i]
            c = shapes[i][0]
            add(f"dec.deconv{i}.w", _xavier(rng, (f, c, k, k), f * k * k, c * k * k))
            add(f"dec.deconv{i}.b", np.zeros(c))
        return cls(config, params, values)

    def _check(self) -> None:
        cfg = self.config
        if self.values.shape != (cfg.n_keys,):
            raise ConfigError(f"values shape {self.values.shape} != ({cfg.n_keys},)")
        if not (np.all(self.values > cfg.v_min) and np.all(self.values < cfg.v_max)):
            raise ConfigError("value supports must lie strictly inside (v_min, v_max)")
        if np.any(np.diff(self.values) <= 0):
            raise ConfigError("value supports must be strictly increasing")
        keys = self.params.get("store.keys")
        if keys is None or keys.shape != (cfg.n_actions, cfg.n_keys, cfg.embed_dim):
            raise ConfigError("store.keys missing or mis-shaped")
        for name, p in self.params.items():
            if p.name != name:
                raise ConfigError(f"parameter registered as {name!r} is named {p.name!r}")

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def keys(self) -> Parameter:
        return self.params["store.keys"]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def copy(self) -> "IDQN":
        params = {n: Parameter(p.data.copy(), n) for n, p in self.params.items()}
        return IDQN(self.config, params, self.values.copy())

    def load_from(self, other: "IDQN") -> None:
        """Overwrite every parameter with a copy of ``other``'s."""
        if other.params.keys() != self.params.keys():
            raise ConfigError("models have different parameter sets")
        for name, p in self.params.items():
            src = other.params[name].data
            if src.shape != p.shape:
                raise DimensionError(f"{name}: shape {src.shape} vs {p.shape}")
            p.data = src.copy()

    # ------------------------------------------------------------------
    # forward passes (batched)

    def encode(self, obs) -> Tensor:
        """Observations B×K×H×W (array or Tensor) to embeddings B×D."""
        x = obs if isinstance(obs, Tensor) else Tensor(obs)
        if x.ndim != 4 or x.shape[1:] != self.config.obs_shape:
            raise DimensionError(f"encode: expected B×{self.config.obs_shape}, got {x.shape}")
        for i, (_f, _k, s) in enumerate(self.config.conv_layers):
            x = ad.relu(ad.conv2d(x, self.params[f"enc.conv{i}.w"], s, self.params[f"enc.conv{i}.b"]))
        x = x.reshape(x.shape[0], -1)
        return ad.matmul(x, self.params["enc.fc.w"]) + self.params["enc.fc.b"]

    def attention(self, h: Tensor) -> Tensor:
        """Embeddings B×D to attention weights B×A×N."""
        cfg = self.config
        keys = self.keys.reshape(cfg.n_actions * cfg.n_keys, cfg.embed_dim)
        logits = ad.matmul(h, keys.T).reshape(h.shape[0], cfg.n_actions, cfg.n_keys)
        return ad.softmax_rows(logits)

    def decode(self, h: Tensor) -> Tensor:
        """Embeddings B×D to reconstructed observations B×K×H×W."""
        cfg = self.config
        shapes = cfg.feature_shapes()
        x = ad.matmul(h, self.params["dec.fc.w"]) + self.params["dec.fc.b"]
        x = ad.relu(x).reshape((h.shape[0],) + shapes[-1])
        for i in reversed(range(len(cfg.conv_layers))):
            s = cfg.conv_layers[i][2]
            x = ad.deconv2d(x, self.params[f"dec.deconv{i}.w"], s, self.params[f"dec.deconv{i}.b"])
            if i > 0:
                x = ad.relu(x)
        return x


# ---------------------------------------------------------------------------
# array-level head math (no graph)


def attention_np(h: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Softmax over dot products; ``keys`` N×D with ``h`` D, or A×N×D with ``h`` B×D."""
    h, keys = np.asarray(h), np.asarray(keys)
    logits = h @ keys.T if keys.ndim == 2 else np.einsum("...d,and->...an", h, keys)
    return ad.softmax_np(logits)


def q_from_weights(w: np.ndarray, values: np.ndarray) -> np.ndarray:
    # elementwise product and row sum rather than matmul, so a row's Q does
    # not depend on how many rows share the call
    return (np.asarray(w) * np.asarray(values)).sum(axis=-1)


def u_from_weights(w: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Standard deviation of the return distribution ``w`` over ``values`` (clamped at 0)."""
    w = np.asarray(w)
    v = np.asarray(values)
    q = w @ v
    return np.sqrt(np.maximum(0.0, w @ (v * v) - q * q))


def ucb_argmax(q: np.ndarray, u: np.ndarray, lambda_exp: float) -> np.ndarray | int:
    """Row-wise argmax of q + lambda_exp * u; np.argmax already prefers the lowest index."""
    if lambda_exp < 0:
        raise ContractError(f"lambda_exp must be >= 0, got {lambda_exp}")
    score = np.asarray(q) + lambda_exp * np.asarray(u)
    return np.argmax(score, axis=-1)


class Diagnostics(NamedTuple):
    q: np.ndarray  # A
    u: np.ndarray  # A
    w: np.ndarray  # A×N


def _as_batch(obs: np.ndarray, model: IDQN) -> tuple[np.ndarray, bool]:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape == model.config.obs_shape:
        return obs[None], True
    if obs.ndim == 4 and obs.shape[1:] == model.config.obs_shape:
        return obs, False
    raise DimensionError(f"observation shape {obs.shape} does not match {model.config.obs_shape}")


def encode(model: IDQN, obs: np.ndarray) -> np.ndarray:
    """Embedding of one observation (D) or a batch (B×D)."""
    batch, single = _as_batch(obs, model)
    with ad.no_grad():
        h = model.encode(batch).data
    return h[0] if single else h


def attention_weights(model: IDQN, h: np.ndarray, a: int) -> np.ndarray:
    return attention_np(np.asarray(h), model.keys.data[int(a)])


def all_attention(model: IDQN, h: np.ndarray) -> np.ndarray:
    """A×N weights for one embedding, or B×A×N for a batch."""
    h = np.asarray(h)
    w = attention_np(np.atleast_2d(h), model.keys.data)
    return w[0] if h.ndim == 1 else w


def q_value(model: IDQN, h: np.ndarray, a: int) -> float:
    return float(q_from_weights(attention_weights(model, h, a), model.values))


def q_values(model: IDQN, h: np.ndarray) -> np.ndarray:
    return q_from_weights(all_attention(model, h), model.values)


def uncertainty(model: IDQN, h: np.ndarray, a: int) -> float:
    return float(u_from_weights(attention_weights(model, h, a), model.values))


def diagnostics(model: IDQN, obs: np.ndarray) -> Diagnostics:
    w = all_attention(model, encode(model, obs))
    return Diagnostics(q_from_weights(w, model.values), u_from_weights(w, model.values), w)


def select_action(model: IDQN, obs: np.ndarray, lambda_exp: float) -> tuple[int, Diagnostics]:
    diag = diagnostics(model, obs)
    return int(ucb_argmax(diag.q, diag.u, lambda_exp)), diag


def decode(model: IDQN, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    if h.shape[-1] != model.config.embed_dim:
        raise DimensionError(f"decode: embedding length {h.shape[-1]} != {model.config.embed_dim}")
    with ad.no_grad():
        img = model.decode(Tensor(np.atleast_2d(h))).data
    return img[0] if single else img


def invert_key(model: IDQN, a: int, i: int) -> np.ndarray:
    """Decode the stored key for (action a, value index i); independent of any input."""
    cfg = model.config
    if not 0 <= int(a) < cfg.n_actions:
        raise IndexError(f"action {a} out of range 0..{cfg.n_actions - 1}")
    if not 0 <= int(i) < cfg.n_keys:
        raise IndexError(f"key index {i} out of range 0..{cfg.n_keys - 1}")
    return decode(model, model.keys.data[int(a), int(i)])


def invert_all_keys(model: IDQN) -> np.ndarray:
    """A×N×K×H×W decoded keys."""
    cfg = model.config
    imgs = decode(model, model.keys.data.reshape(-1, cfg.embed_dim))
    return imgs.reshape((cfg.n_actions, cfg.n_keys) + cfg.obs_shape)


def interpolate_embeddings(model: IDQN, start: np.ndarray, final: np.ndarray, lambdas: Sequence[float]) -> list[np.ndarray]:
    """Decode ``start + lam * (final - start)`` for each lam in [0, 1]."""
    start = np.asarray(start, dtype=np.float64)
    final = np.asarray(final, dtype=np.float64)
    out = []
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ContractError(f"interpolation weight {lam} outside [0, 1]")
        emb = start if lam == 0 else final if lam == 1 else start + lam * (final - start)
        out.append(decode(model, emb))
    return out
