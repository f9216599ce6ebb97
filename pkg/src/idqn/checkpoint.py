"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IDQN"  u32 version
    u32 n    n bytes UTF-8 JSON (configs, step counters, PRNG state)
    u32 count
    count × record:  u16 name_len, name, u8 ndim, u32 × ndim dims, f64 × prod(dims)

Records hold every model parameter (``param/<name>``), the value supports
(``store.values``) and the Adam moments (``adam.m/<name>``, ``adam.v/<name>``).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from idqn.autodiff import Parameter
from idqn.env import LayoutConfig
from idqn.errors import CheckpointError
from idqn.losses import LossWeights
from idqn.model import IDQN, ModelConfig
from idqn.trainer import Adam, Checkpoint, TrainerConfig

MAGIC = b"IDQN"
VERSION = 1


def layout_to_dict(layout: LayoutConfig) -> dict:
    d = dataclasses.asdict(layout)
    d["walls"] = sorted(list(c) for c in layout.walls)
    d["pellets"] = None if layout.pellets is None else sorted(list(c) for c in layout.pellets)
    d["agent"] = None if layout.agent is None else list(layout.agent)
    return d


def layout_from_dict(d: dict) -> LayoutConfig:
    d = dict(d)
    d["walls"] = frozenset(tuple(c) for c in d["walls"])
    d["pellets"] = None if d["pellets"] is None else frozenset(tuple(c) for c in d["pellets"])
    d["agent"] = None if d["agent"] is None else tuple(d["agent"])
    return LayoutConfig(**d)


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    recs = [(f"param/{n}", p.data) for n, p in ckpt.model.params.items()]
    recs.append(("store.values", ckpt.model.values))
    for n in sorted(ckpt.optimizer.m):
        recs.append((f"adam.m/{n}", ckpt.optimizer.m[n]))
        recs.append((f"adam.v/{n}", ckpt.optimizer.v[n]))
    return recs


def dumps(ckpt: Checkpoint) -> bytes:
    meta = {
        "model": ckpt.model_config.to_dict(),
        "trainer": dataclasses.asdict(ckpt.trainer_config),
        "loss": dataclasses.asdict(ckpt.weights),
        "layout": layout_to_dict(ckpt.layout),
        "step": ckpt.step,
        "episode": ckpt.episode,
        "seed": ckpt.seed,
        "adam": {
            "t": ckpt.optimizer.t,
            "lr": ckpt.optimizer.lr,
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
            "weight_decay": ckpt.optimizer.weight_decay,
        },
        "rng_state": ckpt.rng_state,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    recs = _records(ckpt)
    out.append(struct.pack("<I", len(recs)))
    for name, arr in recs:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not an i-DQN checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        meta = json.loads(r.take(n, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config blob: {exc}") from exc
    (count,) = r.unpack("<I", "record count")
    arrays: dict[str, np.ndarray] = {}
    for k in range(count):
        (ln,) = r.unpack("<H", f"record {k} name length")
        name = r.take(ln, f"record {k} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * size, f"{name} data")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")

    try:
        model_config = ModelConfig.from_dict(meta["model"])
        params = {
            name[len("param/") :]: Parameter(arr, name[len("param/") :])
            for name, arr in arrays.items()
            if name.startswith("param/")
        }
        model = IDQN(model_config, params, arrays["store.values"])
        a = meta["adam"]
        opt = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"], a["weight_decay"])
        opt.t = a["t"]
        for name, arr in arrays.items():
            if name.startswith("adam.m/"):
                opt.m[name[len("adam.m/") :]] = arr.copy()
            elif name.startswith("adam.v/"):
                opt.v[name[len("adam.v/") :]] = arr.copy()
        return Checkpoint(
            model_config=model_config,
            trainer_config=TrainerConfig(**meta["trainer"]),
            weights=LossWeights(**meta["loss"]),
            layout=layout_from_dict(meta["layout"]),
            model=model,
            optimizer=opt,
            step=meta["step"],
            episode=meta["episode"],
            seed=meta["seed"],
            rng_state=meta["rng_state"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint is missing or has malformed field: {exc}") from exc


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)
