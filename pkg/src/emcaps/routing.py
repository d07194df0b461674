"""EM routing between capsule layers.

Three safeguards are built in:

* ``epsilon`` is added to every per-dimension variance in the M-step, so a
  parent that captured a single child keeps a finite ``log sigma``.
* the amount of data a parent receives is divided by the layer's
  architecture-derived mean data before it scales the activation cost.
* the E-step normalises each child's assignments over every connected
  parent, across parent types *and* parent positions. The realignment onto
  child columns goes through the spatial routing map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import POSE, CapsuleTensor, SpatialRoutingMap, VoteTensor
from .tensor import Tensor

EPSILON = 1e-4
GUARD = 1e-12
NORMALIZATIONS = ("positions", "types-only")
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class RoutingNumericsError(FloatingPointError):
    def __init__(self, layer: str, iteration: int, tensor: str):
        self.layer, self.iteration, self.tensor = layer, iteration, tensor
        super().__init__(f"non-finite {tensor} in layer {layer or '?'} at routing iteration {iteration}")


@dataclass
class RoutingParams:
    beta_a: Tensor
    beta_u: Tensor
    lambdas: Sequence[float]
    mean_data: float
    epsilon: float = EPSILON
    scale_data: bool = True
    normalization: str = "positions"

    def __post_init__(self):
        if self.beta_a.shape != self.beta_u.shape or self.beta_a.ndim != 1:
            raise ValueError(f"beta_a {self.beta_a.shape} and beta_u {self.beta_u.shape} must be (O,)")
        if not 1 <= len(self.lambdas):
            raise ValueError("need at least one routing iteration")
        # epsilon == 0 is accepted only to reproduce the variance-collapse failure
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.mean_data <= 0:
            raise ValueError(f"mean_data must be positive, got {self.mean_data}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")

    @property
    def iterations(self) -> int:
        return len(self.lambdas)


@dataclass
class MStepResult:
    mu: Tensor            # (b, P, O, 16)
    sigma_sq: Tensor      # (b, P, O, 16)
    activation: Tensor    # (b, P, O)
    data: Tensor          # (b, P, O), unscaled sum of r'
    argument: Tensor      # (b, P, O), logistic input


@dataclass
class RoutingSnapshot:
    """Numpy copy of one routing iteration, used by the diagnostics."""

    layer: str
    iteration: int
    R: np.ndarray           # assignments fed to this iteration's M-step (b, P, S, O)
    mu: np.ndarray
    sigma_sq: np.ndarray
    a_parent: np.ndarray
    argument: np.ndarray
    data: np.ndarray
    routing_map: np.ndarray
    in_types: int
    epsilon: float = EPSILON
    meta: dict = field(default_factory=dict)


def init_assignments(rmap: SpatialRoutingMap, in_types: int, out_types: int) -> np.ndarray:
    """Uniform assignments ``(1, P, K*K*I, O)``: each child splits 1 over its connected parents."""
    deg = rmap.child_degree
    idx = rmap.window_index
    if np.any(deg[idx] == 0):
        raise ValueError("a tiled child has no connected parent")
    per_slot = 1.0 / (deg[idx] * out_types)                       # (P, KK)
    r = np.repeat(per_slot, in_types, axis=1)                      # (P, KK*I)
    return np.broadcast_to(r[None, :, :, None], (1,) + r.shape + (out_types,)).copy()


def activation_argument(sigma_sq: Tensor, data: Tensor, beta_a: Tensor, beta_u: Tensor,
                        lam: float, mean_data: float | None) -> Tensor:
    """``lam * (beta_a - sum_h (beta_u + log sigma_h) * D)`` with ``D = data / mean_data``.

    ``mean_data=None`` leaves the data unscaled.
    """
    scaled = data if mean_data is None else data / float(mean_data)
    log_sigma = 0.5 * T.log(sigma_sq)
    cost = T.reduce_sum(beta_u[:, None] + log_sigma, axis=-1) * scaled
    return lam * (beta_a - cost)


def to_parent_major(votes: Tensor) -> Tensor:
    """(b, P, S, O, 16) -> (b, P, O, S, 16), the layout the routing loop works in."""
    return T.transpose(votes, (0, 1, 3, 2, 4))


def _m_step(vt: Tensor, R: Tensor, child_act: Tensor, params: RoutingParams, lam: float):
    """M-step on parent-major votes; also returns the squared deviations for the E-step."""
    rp = R * child_act[..., None]                                           # (b, P, S, O)
    total = T.reduce_sum(rp, axis=2)                                       # (b, P, O)
    w = T.transpose(rp / T.maximum(total, GUARD)[:, :, None], (0, 1, 3, 2))[..., None, :]  # (b, P, O, 1, S)
    mu = w @ vt                                                            # (b, P, O, 1, 16)
    sq = T.square(vt - mu)                                                 # (b, P, O, S, 16)
    sigma_sq = w @ sq + params.epsilon
    b, p, o = total.shape
    mu = T.reshape(mu, (b, p, o, POSE))
    sigma_sq = T.reshape(sigma_sq, (b, p, o, POSE))
    arg = activation_argument(sigma_sq, total, params.beta_a, params.beta_u, lam,
                              params.mean_data if params.scale_data else None)
    return MStepResult(mu, sigma_sq, T.logistic(arg), total, arg), sq


def m_step(votes: Tensor, R, child_act: Tensor, params: RoutingParams, lam: float) -> MStepResult:
    """Fit a diagonal Gaussian and an activation for every parent.

    votes (b, P, S, O, 16), R (., P, S, O), child_act (b, P, S).
    """
    return _m_step(to_parent_major(votes), T.as_tensor(R, like=votes), child_act, params, lam)[0]


def _log_scores(sq: Tensor, sigma_sq: Tensor, a_parent: Tensor) -> Tensor:
    b, p, o, s, h = sq.shape
    inv = T.reshape(-0.5 / sigma_sq, (b, p, o, h, 1))
    quad = T.reshape(sq @ inv, (b, p, o, s))
    norm = T.reduce_sum(0.5 * T.log(sigma_sq), axis=-1) + h * _HALF_LOG_2PI       # (b, P, O)
    return T.transpose(quad + (T.log(a_parent) - norm)[..., None], (0, 1, 3, 2))  # (b, P, S, O)


def log_scores(votes: Tensor, mu: Tensor, sigma_sq: Tensor, a_parent: Tensor) -> Tensor:
    """``log(a_j) + log p_ij`` under each parent's diagonal Gaussian: (b, P, S, O)."""
    sq = T.square(to_parent_major(votes) - mu[:, :, :, None])
    return _log_scores(sq, sigma_sq, a_parent)


def child_max(scores: np.ndarray, rmap: SpatialRoutingMap, in_types: int) -> np.ndarray:
    """Per-child maximum of tiled scores ``(b, P, S, O)`` -> ``(b, C, I)``."""
    b, p, s, o = scores.shape
    flat = scores.max(axis=-1).reshape(b, p * (s // in_types), in_types)
    table = rmap.parents_of
    padded = np.concatenate([flat, np.full((b, 1, in_types), -np.inf)], axis=1)
    return padded[:, table].max(axis=2)                      # table's -1 hits the pad row


def realign_sum(x: Tensor, rmap: SpatialRoutingMap, in_types: int) -> Tensor:
    """Sum tiled entries ``(b, P, S)`` onto child columns ``(b, C, I)`` via the routing map.

    This is the column sum of the sparse child-aligned layout, written as a
    product with the map's one-hot realignment matrix.
    """
    b, p, s = x.shape
    x = T.transpose(T.reshape(x, (b, p * (s // in_types), in_types)), (0, 2, 1))   # (b, I, P*KK)
    return T.transpose(x @ rmap.realign.astype(x.dtype), (0, 2, 1))              # (b, C, I)


def gather_children(x: Tensor, rmap: SpatialRoutingMap, p: int, s: int) -> Tensor:
    """Inverse of :func:`realign_sum`: child values ``(b, C, I)`` back to tiled ``(b, P, S)``."""
    b, _, i = x.shape
    x = T.transpose(x, (0, 2, 1)) @ rmap.realign.T.astype(x.dtype)                 # (b, I, P*KK)
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, p, s))


def normalize_scores(scores: Tensor, rmap: SpatialRoutingMap, in_types: int,
                     normalization: str = "positions") -> Tensor:
    """Turn log-scores into assignments summing to 1 for every child instance."""
    sd = scores.data
    if np.isnan(sd).any():
        raise FloatingPointError("NaN in E-step log-scores")
    if normalization == "types-only":
        m = sd.max(axis=-1, keepdims=True)
        bad = ~np.isfinite(m)
        e = T.exp(T.where(bad, 0.0, scores) - np.where(bad, 0.0, m))
        return e / T.reduce_sum(e, axis=-1, keepdims=True)
    b, p, s, o = sd.shape
    m = child_max(sd, rmap, in_types)
    bad = ~np.isfinite(m)
    m = np.where(bad, 0.0, m)
    # shift constants are detached; the normalised ratio does not depend on them
    shift = gather_children(Tensor._wrap(m), rmap, p, s).data[..., None]
    bad_t = gather_children(Tensor._wrap(bad.astype(sd.dtype)), rmap, p, s).data[..., None] > 0
    bad_t = np.broadcast_to(bad_t, sd.shape)
    e = T.exp(T.where(bad_t, 0.0, scores) - shift)                           # (b, P, S, O)
    col = realign_sum(T.reduce_sum(e, axis=-1), rmap, in_types)              # (b, C, I)
    return e / gather_children(col, rmap, p, s)[..., None]


def e_step(votes: Tensor, mu: Tensor, sigma_sq: Tensor, a_parent: Tensor, rmap: SpatialRoutingMap,
           in_types: int, normalization: str = "positions") -> Tensor:
    """New assignments ``(b, P, S, O)`` from parent Gaussians and activations."""
    return normalize_scores(log_scores(votes, mu, sigma_sq, a_parent), rmap, in_types, normalization)


def sparse_layout(tiled: np.ndarray, rmap: SpatialRoutingMap, in_types: int) -> np.ndarray:
    """Materialise tiled values ``(b, P, S, O)`` as the child-aligned ``(b, P, C, I, O)`` layout.

    Entries for unconnected (parent position, child position) pairs are zero.
    """
    b, p, s, o = tiled.shape
    kk = s // in_types
    out = np.zeros((b, p, rmap.shape[1], in_types, o), dtype=tiled.dtype)
    rows = np.repeat(np.arange(p), kk)
    out[:, rows, rmap.window_index.ravel()] = tiled.reshape(b, p * kk, in_types, o)
    return out


def _finite(t: Tensor, layer: str, it: int, name: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise RoutingNumericsError(layer, it, name)


def em_routing(votes: VoteTensor, rmap: SpatialRoutingMap, params: RoutingParams,
               trace: list | None = None, layer: str = "") -> CapsuleTensor:
    """Run ``iterations`` M-steps with an E-step between consecutive ones.

    Snapshots of every iteration are appended to ``trace`` when given; on a
    numerical failure the snapshots gathered so far stay in ``trace``.
    """
    v = votes.votes
    b, p, s, o, _ = v.shape
    in_types = rmap.geometry.in_types
    if (p, s) != (rmap.shape[0], rmap.window_index.shape[1] * in_types):
        raise T.ShapeError(f"votes {v.shape} do not match routing map {rmap.shape} with {in_types} types")
    if o != params.beta_a.shape[0]:
        raise T.ShapeError(f"votes have {o} parent types but beta has {params.beta_a.shape[0]}")
    R = T.as_tensor(init_assignments(rmap, in_types, o), like=v)
    vt = to_parent_major(v)
    for it, lam in enumerate(params.lambdas):
        step, sq = _m_step(vt, R, votes.activations, params, lam)
        if trace is not None:
            trace.append(RoutingSnapshot(
                layer=layer, iteration=it,
                R=np.broadcast_to(R.data, (b, p, s, o)).copy(),
                mu=step.mu.data.copy(), sigma_sq=step.sigma_sq.data.copy(),
                a_parent=step.activation.data.copy(), argument=step.argument.data.copy(),
                data=step.data.data.copy(), routing_map=rmap.matrix, in_types=in_types,
                epsilon=params.epsilon, meta={"lambda": lam, "normalization": params.normalization,
                                              "scale_data": params.scale_data,
                                              "mean_data": params.mean_data}))
        for name, t in (("mu", step.mu), ("sigma_sq", step.sigma_sq), ("activation", step.activation)):
            _finite(t, layer, it, name)
        if it < params.iterations - 1:
            try:
                scores = _log_scores(sq, step.sigma_sq, step.activation)
                R = normalize_scores(scores, rmap, in_types, params.normalization)
            except FloatingPointError:
                raise RoutingNumericsError(layer, it, "log_scores") from None
            _finite(R, layer, it, "R")
    wp, hp = votes.parent_grid
    poses = T.reshape(step.mu, (b, wp, hp, o, 4, 4))
    acts = T.reshape(step.activation, (b, wp, hp, o))
    return CapsuleTensor(poses, acts)
