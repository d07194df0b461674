"""The "smaller" matrix-capsule network, spread loss and training schedules."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .layers import (ConvGeometry, class_geometry, compute_votes, flatten_for_class_caps,
                     output_extent, primary_caps, relu_conv1)
from .routing import EPSILON, NORMALIZATIONS, RoutingParams, em_routing
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    A: int = 64
    B: int = 8
    C: int = 16
    D: int = 16
    num_classes: int = 5
    input_size: int = 32
    iterations: int = 2
    coordinate_addition: bool = True
    mean_data_scaling: bool = True
    epsilon: float = EPSILON
    normalization: str = "positions"
    conv1_kernel: int = 5
    conv1_stride: int = 2
    caps1_kernel: int = 3
    caps1_stride: int = 2
    caps2_kernel: int = 3
    caps2_stride: int = 1
    weight_decay: float = 2e-7
    base_lr: float = 3e-3
    lr_decay_steps: int = 2000
    lr_decay_rate: float = 0.96
    batch_size: int = 64
    optimizer: str = "adam"
    beta_init_std: float = 1.0
    transform_init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        for f in ("A", "B", "C", "D", "num_classes", "input_size", "batch_size", "lr_decay_steps"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if self.iterations not in (1, 2, 3):
            raise ValueError(f"iterations must be 1, 2 or 3, got {self.iterations}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        defaults = cls()
        typed = {}
        for k, v in d.items():
            ref = getattr(defaults, k)
            if isinstance(ref, bool):
                if not isinstance(v, bool):
                    raise TypeError(f"{k} must be a bool, got {v!r}")
            elif isinstance(ref, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise TypeError(f"{k} must be an int, got {v!r}")
            elif isinstance(ref, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise TypeError(f"{k} must be a number, got {v!r}")
                v = float(v)
            elif isinstance(ref, str) and not isinstance(v, str):
                raise TypeError(f"{k} must be a string, got {v!r}")
            typed[k] = v
        return cls(**typed)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# schedules


def lambda_schedule(i: int) -> float:
    """Inverse temperature for routing iteration ``i`` (0-based)."""
    if i < 0:
        raise ValueError("routing iteration index must be >= 0")
    return 0.01 * (1.0 - 0.95 ** (i + 1))


def margin_schedule(step: int) -> float:
    x = min(10.0, step / 50000.0 - 4.0)
    return 0.2 + 0.79 / (1.0 + math.exp(-x))


def learning_rate(step: int, config: NetworkConfig) -> float:
    return config.base_lr * config.lr_decay_rate ** (step / config.lr_decay_steps)


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class LayerInfo:
    name: str
    details: str
    shape: tuple[int, int, int]       # (W, H, Ch or O)
    geometry: ConvGeometry | None = None

    @property
    def max_data(self) -> int | None:
        return None if self.geometry is None else self.geometry.max_data

    @property
    def mean_data(self) -> float | None:
        return None if self.geometry is None else self.geometry.mean_data


def layer_plan(config: NetworkConfig) -> list[LayerInfo]:
    n = config.input_size
    c1 = -(-n // config.conv1_stride)
    g1 = ConvGeometry(config.caps1_kernel, config.caps1_stride, config.B, config.C, (c1, c1))
    g2 = ConvGeometry(config.caps2_kernel, config.caps2_stride, config.C, config.D, g1.parent)
    w2 = g2.parent[0]
    if g2.parent[0] != g2.parent[1]:
        raise ShapeError(f"conv_caps2 grid {g2.parent} is not square")
    gc = ConvGeometry(w2, 1, config.D, config.num_classes, g2.parent)
    return [
        LayerInfo("input", "", (n, n, 1)),
        LayerInfo("relu_conv1", f"K={config.conv1_kernel}, S={config.conv1_stride}, Ch={config.A}",
                  (c1, c1, config.A)),
        LayerInfo("primary_caps", f"K=1, S=1, Ch={config.B}", (c1, c1, config.B)),
        LayerInfo("conv_caps1", f"K={g1.kernel}, S={g1.stride}, O={config.C}", g1.parent + (config.C,), g1),
        LayerInfo("conv_caps2", f"K={g2.kernel}, S={g2.stride}, O={config.D}", g2.parent + (config.D,), g2),
        LayerInfo("class_caps", f"flatten, O={config.num_classes}", (1, 1, config.num_classes), gc),
    ]


def format_plan(config: NetworkConfig) -> str:
    def fmt_mean(x):
        return f"{x:#.3g}".rstrip(".")

    rows = [("Layer", "Details", "Output shape", "Max", "Mean")]
    for info in layer_plan(config):
        shape = "(?, " + ", ".join(str(s) for s in info.shape) + ")"
        mx = "" if info.max_data is None else str(info.max_data)
        mn = "" if info.mean_data is None else fmt_mean(info.mean_data)
        rows.append((info.name, info.details, shape, mx, mn))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(config: NetworkConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    k1 = config.conv1_kernel
    plan = {info.name: info for info in layer_plan(config)}
    dtype = np.dtype(config.dtype)

    def glorot(fan_in, fan_out, shape):
        return _trunc_normal(rng, shape, math.sqrt(2.0 / (fan_in + fan_out)))

    def transform(shape):
        return _trunc_normal(rng, shape, config.transform_init_std) + np.eye(4)

    p = {
        "conv1/w": _trunc_normal(rng, (k1 * k1, config.A), math.sqrt(2.0 / (k1 * k1))),
        "conv1/b": np.zeros(config.A),
        "primary/pose_w": glorot(config.A, config.B * 16, (config.A, config.B * 16)),
        "primary/pose_b": np.zeros(config.B * 16),
        "primary/act_w": glorot(config.A, config.B, (config.A, config.B)),
        "primary/act_b": np.zeros(config.B),
    }
    for name in ("conv_caps1", "conv_caps2"):
        g = plan[name].geometry
        p[f"{name}/w"] = transform((g.slots, g.out_types, 4, 4))
        p[f"{name}/beta_a"] = rng.normal(0.0, config.beta_init_std, g.out_types)
        p[f"{name}/beta_u"] = rng.normal(0.0, config.beta_init_std, g.out_types)
    p["class_caps/w"] = transform((config.D, config.num_classes, 4, 4))
    p["class_caps/beta_a"] = rng.normal(0.0, config.beta_init_std, config.num_classes)
    p["class_caps/beta_u"] = rng.normal(0.0, config.beta_init_std, config.num_classes)
    return {k: v.astype(dtype) for k, v in p.items()}


def decayed(name: str) -> bool:
    """Convolution and transformation weights take weight decay; biases and betas do not."""
    return name.rsplit("/", 1)[-1] in ("w", "pose_w", "act_w")


def _routing_params(params, name: str, mean_data: float, config: NetworkConfig) -> RoutingParams:
    return RoutingParams(
        beta_a=params[f"{name}/beta_a"], beta_u=params[f"{name}/beta_u"],
        lambdas=[lambda_schedule(i) for i in range(config.iterations)],
        mean_data=mean_data, epsilon=config.epsilon, scale_data=config.mean_data_scaling,
        normalization=config.normalization)


def forward(params: Mapping[str, Tensor], images, config: NetworkConfig, trace: list | None = None) -> Tensor:
    """Class capsule activations ``(batch, num_classes)`` for images ``(batch, N, N, 1)``."""
    params = {k: v if isinstance(v, Tensor) else Tensor(v, dtype=v.dtype) for k, v in params.items()}
    images = T.as_tensor(images, like=params["conv1/w"])
    n = config.input_size
    if images.ndim != 4 or images.shape[1:] != (n, n, 1):
        raise ShapeError(f"input: expected (batch, {n}, {n}, 1), got {images.shape}")
    plan = {info.name: info for info in layer_plan(config)}
    x = relu_conv1(images, params["conv1/w"], params["conv1/b"], config.conv1_kernel, config.conv1_stride)
    _expect("relu_conv1", x.shape[1:], plan["relu_conv1"].shape)
    caps = primary_caps(x, params["primary/pose_w"], params["primary/pose_b"],
                        params["primary/act_w"], params["primary/act_b"])
    _expect("primary_caps", caps.activations.shape[1:], plan["primary_caps"].shape)
    for name in ("conv_caps1", "conv_caps2"):
        geom = plan[name].geometry
        votes, rmap = compute_votes(caps, params[f"{name}/w"], geom)
        caps = em_routing(votes, rmap, _routing_params(params, name, geom.mean_data, config), trace, name)
        _expect(name, caps.activations.shape[1:], plan[name].shape)
    votes, rmap = flatten_for_class_caps(caps, params["class_caps/w"], config.coordinate_addition)
    geom = class_geometry(caps, config.num_classes)
    out = em_routing(votes, rmap, _routing_params(params, "class_caps", geom.mean_data, config), trace,
                     "class_caps")
    return T.reshape(out.activations, (images.shape[0], config.num_classes))


def _expect(layer: str, got, want) -> None:
    if tuple(got) != tuple(want):
        raise ShapeError(f"{layer}: produced {tuple(got)}, expected {tuple(want)}")


def spread_loss(activations: Tensor, target, margin: float) -> Tensor:
    """Batch mean of ``sum_{i != t} max(0, margin - (a_t - a_i))^2``."""
    target = np.asarray(target)
    b, k = activations.shape
    if target.shape != (b,) or target.dtype.kind not in "iu" or target.min() < 0 or target.max() >= k:
        raise ValueError(f"targets must be {b} integers in [0, {k})")
    onehot = np.eye(k, dtype=bool)[target]
    a_t = T.reduce_sum(T.where(onehot, activations, 0.0), axis=1, keepdims=True)
    gap = T.relu(margin - (a_t - activations))
    gap = T.where(onehot, 0.0, gap)
    return T.reduce_sum(gap * gap) / float(b)


def weight_penalty(params: Mapping[str, Tensor]) -> Tensor:
    total = None
    for name, p in params.items():
        if decayed(name):
            term = T.reduce_sum(p * p)
            total = term if total is None else total + term
    return total
