"""Optimisation loop pieces: Adam, train state, one step, checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .network import (NetworkConfig, forward, lambda_schedule, learning_rate,
                      margin_schedule, spread_loss, weight_penalty)
from .routing import RoutingNumericsError

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; carries the state and batch that produced it."""

    def __init__(self, message: str, state: "TrainState", images: np.ndarray, labels: np.ndarray):
        super().__init__(message)
        self.state, self.images, self.labels = state, images, labels


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, params: dict[str, np.ndarray]) -> "TrainState":
        return cls(params=dict(params),
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_update(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> TrainState:
    t = state.step + 1
    params, m, v = {}, {}, {}
    for k, p in state.params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        params[k] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return TrainState(params=params, m=m, v=v, step=t, epoch=state.epoch)


def loss_and_grads(params: dict[str, np.ndarray], images, labels, config: NetworkConfig, margin: float):
    tape = T.Tape()
    ps = {k: tape.parameter(k, v) for k, v in params.items()}
    with tape:
        acts = forward(ps, images, config)
        spread = spread_loss(acts, labels, margin)
        loss = spread + config.weight_decay * weight_penalty(ps)
    grads = T.backward(tape, loss)
    return loss.item(), spread.item(), acts.data, grads


def train_step(state: TrainState, images, labels, config: NetworkConfig) -> tuple[TrainState, dict]:
    margin = margin_schedule(state.step)
    lr = learning_rate(state.step, config)
    try:
        loss, spread, acts, grads = loss_and_grads(state.params, images, labels, config, margin)
    except (RoutingNumericsError, T.GradientError) as e:
        raise TrainingDiverged(str(e), state, images, labels) from e
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {state.step}", state, images, labels)
    new = adam_update(state, grads, lr)
    metrics = {
        "step": state.step,
        "loss": loss,
        "spread_loss": spread,
        "accuracy": float(np.mean(acts.argmax(axis=1) == np.asarray(labels))),
        "lr": lr,
        "margin": margin,
    }
    for i in range(config.iterations):
        metrics[f"lambda_{i}"] = lambda_schedule(i)
    return new, metrics


def predict(params: dict[str, np.ndarray], images, config: NetworkConfig, batch_size: int = 64) -> np.ndarray:
    """Class activations for ``images``, evaluated without a tape."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(params, images[i:i + batch_size], config).data)
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


# ---------------------------------------------------------------------------
# container format: named arrays plus a JSON header under "__meta__"


def write_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    meta = dict(meta, format_version=FORMAT_VERSION,
                shapes={k: list(np.shape(a)) for k, a in arrays.items()},
                dtypes={k: str(np.asarray(a).dtype) for k, a in arrays.items()})
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        np.savez(f, __meta__=header, **arrays)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise CheckpointError(f"no such file: {path}") from None
    except Exception as e:  # zipfile / format errors
        raise CheckpointError(f"corrupt container {path}: {e}") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} has no header")
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except ValueError as e:
        raise CheckpointError(f"unreadable header in {path}: {e}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    for k, shape in meta.get("shapes", {}).items():
        if k not in arrays or list(arrays[k].shape) != shape:
            raise CheckpointError(f"{path}: array {k!r} missing or has wrong shape")
    return arrays, meta


def save_checkpoint(path, state: TrainState, config: NetworkConfig, extra: dict | None = None) -> None:
    arrays = {}
    for k in state.params:
        arrays[f"param/{k}"] = state.params[k]
        arrays[f"adam_m/{k}"] = state.m[k]
        arrays[f"adam_v/{k}"] = state.v[k]
    meta = {"kind": "checkpoint", "step": state.step, "epoch": state.epoch,
            "config": config.to_dict(), "extra": extra or {}}
    write_container(path, arrays, meta)


def load_checkpoint(path) -> tuple[TrainState, NetworkConfig]:
    arrays, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint")
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for k, a in arrays.items():
        head, _, name = k.partition("/")
        if head in groups:
            groups[head][name] = a
    config = NetworkConfig.from_dict(meta["config"])
    state = TrainState(params=groups["param"], m=groups["adam_m"], v=groups["adam_v"],
                       step=int(meta["step"]), epoch=int(meta["epoch"]))
    if not state.params or set(state.m) != set(state.params) or set(state.v) != set(state.params):
        raise CheckpointError(f"{path}: parameter groups are incomplete")
    return state, config
