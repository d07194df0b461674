"""Front layers, vote computation and the spatial routing map.

Capsule tensors are laid out ``(batch, W, H, T, 4, 4)`` for poses and
``(batch, W, H, T)`` for activations. Spatial positions are flattened
row-major over ``(W, H)``. Kernel slots are flattened over
``(kernel_x, kernel_y, child_type)`` in that order, which is also the order
of the non-zero columns in each row of the routing map.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

POSE = 16


@dataclass(frozen=True)
class CapsuleTensor:
    poses: Tensor
    activations: Tensor

    def __post_init__(self):
        p, a = self.poses.shape, self.activations.shape
        if len(p) != 6 or p[-2:] != (4, 4):
            raise ShapeError(f"poses must be (batch, W, H, T, 4, 4), got {p}")
        if p[:4] != a:
            raise ShapeError(f"poses {p} and activations {a} disagree on (batch, W, H, T)")

    @property
    def batch(self) -> int:
        return self.activations.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.activations.shape[1], self.activations.shape[2]

    @property
    def types(self) -> int:
        return self.activations.shape[3]


def output_extent(n: int, kernel: int, stride: int) -> int:
    # unpadded convolution
    return (n - kernel) // stride + 1


@dataclass(frozen=True)
class ConvGeometry:
    """Unpadded capsule convolution geometry.

    ``kernel`` is an int for square windows or ``(kw, kh)``; a one-dimensional
    layer is a ``(k, 1)`` kernel over a ``(n, 1)`` child grid. ``parent`` may
    be omitted and is then derived from ``child``; when given it must agree
    with the unpadded output-extent rule.
    """

    kernel: int | tuple[int, int]
    stride: int
    in_types: int
    out_types: int
    child: tuple[int, int]
    parent: tuple[int, int] | None = None

    def __post_init__(self):
        kw, kh = self.kernel_shape
        if min(kw, kh, self.stride, self.in_types, self.out_types) < 1:
            raise ValueError(f"kernel, stride and type counts must be positive: {self}")
        wc, hc = self.child
        if kw > wc or kh > hc:
            raise ValueError(f"kernel {self.kernel} exceeds child extent {self.child}")
        expect = (output_extent(wc, kw, self.stride), output_extent(hc, kh, self.stride))
        if self.parent is None:
            object.__setattr__(self, "parent", expect)
        elif tuple(self.parent) != expect:
            raise ValueError(f"parent extent {self.parent} inconsistent with child {self.child}, "
                             f"K={self.kernel}, S={self.stride} (expected {expect})")

    @property
    def kernel_shape(self) -> tuple[int, int]:
        k = self.kernel
        return (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))

    @property
    def window(self) -> int:
        kw, kh = self.kernel_shape
        return kw * kh

    @property
    def n_parent(self) -> int:
        return self.parent[0] * self.parent[1]

    @property
    def n_child(self) -> int:
        return self.child[0] * self.child[1]

    @property
    def slots(self) -> int:
        return self.window * self.in_types

    @property
    def max_data(self) -> int:
        return self.window * self.in_types

    @property
    def mean_data(self) -> float:
        return (self.child[0] * self.child[1] * self.in_types) / (self.parent[0] * self.parent[1] * self.out_types)


@dataclass(frozen=True, eq=False)
class SpatialRoutingMap:
    """Binary (parent position x child position) connectivity matrix."""

    matrix: np.ndarray
    geometry: ConvGeometry

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @cached_property
    def window_index(self) -> np.ndarray:
        """``(P, K*K)`` child position for each kernel offset of each parent."""
        kk = self.geometry.window
        rows, cols = np.nonzero(self.matrix)
        return cols.reshape(self.matrix.shape[0], kk)

    @cached_property
    def realign(self) -> np.ndarray:
        """One-hot ``(P*K*K, C)`` matrix taking tiled entries to child columns."""
        idx = self.window_index.ravel()
        m = np.zeros((idx.size, self.matrix.shape[1]))
        m[np.arange(idx.size), idx] = 1.0
        return m

    @cached_property
    def parents_of(self) -> np.ndarray:
        """``(C, max_degree)`` flat tiled indices feeding each child, padded with -1."""
        idx = self.window_index.ravel()
        deg = np.bincount(idx, minlength=self.matrix.shape[1])
        table = np.full((self.matrix.shape[1], max(int(deg.max()), 1)), -1, dtype=np.intp)
        fill = np.zeros_like(deg)
        for q, c in enumerate(idx):
            table[c, fill[c]] = q
            fill[c] += 1
        return table

    @property
    def child_degree(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def build_routing_map(geom: ConvGeometry) -> SpatialRoutingMap:
    (wp, hp), (wc, hc), (kw, kh), s = geom.parent, geom.child, geom.kernel_shape, geom.stride
    # child flat index of every (parent x, parent y, kernel x, kernel y)
    cx = np.arange(wp)[:, None] * s + np.arange(kw)[None, :]
    cy = np.arange(hp)[:, None] * s + np.arange(kh)[None, :]
    child = cx[:, None, :, None] * hc + cy[None, :, None, :]
    matrix = np.zeros((wp * hp, wc * hc), dtype=np.uint8)
    rows = np.repeat(np.arange(wp * hp), kw * kh)
    matrix[rows, child.reshape(-1)] = 1
    return SpatialRoutingMap(matrix, geom)


@dataclass(frozen=True)
class VoteTensor:
    """Votes ``(batch, P, slots, O, 16)`` and tiled child activations ``(batch, P, slots)``."""

    votes: Tensor
    activations: Tensor
    parent_grid: tuple[int, int]

    def __post_init__(self):
        v, a = self.votes.shape, self.activations.shape
        if len(v) != 5 or v[-1] != POSE or v[:3] != a:
            raise ShapeError(f"votes {v} inconsistent with tiled activations {a}")

    @property
    def out_types(self) -> int:
        return self.votes.shape[3]


# ---------------------------------------------------------------------------
# non-routed front layers


def same_padding(n: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + kernel - n, 0)
    return total // 2, total - total // 2


def _window_rows(n_out: int, kernel: int, stride: int) -> np.ndarray:
    return np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, kernel: int, stride: int, padding: str = "same") -> Tensor:
    """2D convolution by explicit window tiling.

    x: (batch, W, H, Cin); weight: (kernel*kernel*Cin, Cout); bias: (Cout,).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (batch, W, H, C), got {x.shape}")
    _, w, h, cin = x.shape
    if weight.shape[0] != kernel * kernel * cin:
        raise ShapeError(f"conv2d weight {weight.shape} does not match kernel {kernel} and {cin} channels")
    if padding == "same":
        px, py = same_padding(w, kernel, stride), same_padding(h, kernel, stride)
        x = T.pad(x, ((0, 0), px, py, (0, 0)))
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")
    _, w, h, _ = x.shape
    ow, oh = output_extent(w, kernel, stride), output_extent(h, kernel, stride)
    x = T.take(x, _window_rows(ow, kernel, stride), axis=1)        # (b, ow, k, H, C)
    x = T.take(x, _window_rows(oh, kernel, stride), axis=3)        # (b, ow, k, oh, k, C)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (x.shape[0], ow, oh, kernel * kernel * cin))
    return x @ weight + bias


def relu_conv1(image: Tensor, weight: Tensor, bias: Tensor, kernel: int = 5, stride: int = 2) -> Tensor:
    """ReLU convolution with "same" padding: (batch, N, N, 1) -> (batch, N/2, N/2, A)."""
    if image.ndim != 4 or image.shape[-1] != 1:
        raise ShapeError(f"relu_conv1 expects (batch, W, H, 1) images, got {image.shape}")
    return T.relu(conv2d(image, weight, bias, kernel, stride, padding="same"))


def primary_caps(features: Tensor, pose_w: Tensor, pose_b: Tensor, act_w: Tensor, act_b: Tensor) -> CapsuleTensor:
    """1x1 convolution to ``B`` capsule types: linear poses, logistic activations."""
    if features.ndim != 4 or features.shape[-1] != pose_w.shape[0]:
        raise ShapeError(f"primary_caps: features {features.shape} do not match weights {pose_w.shape}")
    b, w, h, _ = features.shape
    types = act_w.shape[1]
    if pose_w.shape[1] != types * POSE:
        raise ShapeError(f"primary_caps: pose weights {pose_w.shape} inconsistent with {types} types")
    poses = T.reshape(features @ pose_w + pose_b, (b, w, h, types, 4, 4))
    acts = T.logistic(features @ act_w + act_b)
    return CapsuleTensor(poses, acts)


# ---------------------------------------------------------------------------
# votes


def _transform(tiled: Tensor, weights: Tensor) -> Tensor:
    """Multiply tiled poses (b, P, S, 4, 4) by weights (S, O, 4, 4) -> (b, P, S, O, 16).

    Batched over slots so each product is a (b*P*4, 4) @ (4, O*4) matmul.
    """
    b, p, s = tiled.shape[:3]
    o = weights.shape[1]
    x = T.transpose(tiled, (2, 0, 1, 3, 4))                        # (S, b, P, 4, 4)
    x = T.reshape(x, (s, b * p * 4, 4))
    w = T.reshape(T.transpose(weights, (0, 2, 1, 3)), (s, 4, o * 4))  # (S, m, O*j)
    v = T.reshape(x @ w, (s, b, p, 4, o, 4))                       # (S, b, P, i, O, j)
    v = T.transpose(v, (1, 2, 0, 4, 3, 5))                         # (b, P, S, O, i, j)
    return T.reshape(v, (b, p, s, o, POSE))


def _check_children(children: CapsuleTensor, geom: ConvGeometry) -> None:
    if children.grid != tuple(geom.child) or children.types != geom.in_types:
        raise ShapeError(f"children grid {children.grid} x {children.types} types do not match "
                         f"geometry child {geom.child} x {geom.in_types}")


def tile_children(children: CapsuleTensor, rmap: SpatialRoutingMap) -> tuple[Tensor, Tensor]:
    """Gather each parent's kernel window: poses (b, P, S, 4, 4), activations (b, P, S)."""
    geom = rmap.geometry
    b = children.batch
    c, i = geom.n_child, geom.in_types
    p, kk = rmap.window_index.shape
    poses = T.take(T.reshape(children.poses, (b, c, i, 4, 4)), rmap.window_index, axis=1)
    acts = T.take(T.reshape(children.activations, (b, c, i)), rmap.window_index, axis=1)
    return T.reshape(poses, (b, p, kk * i, 4, 4)), T.reshape(acts, (b, p, kk * i))


def compute_votes(children: CapsuleTensor, weights: Tensor, geom: ConvGeometry) -> tuple[VoteTensor, SpatialRoutingMap]:
    """Convolutional votes with one weight block ``(K*K*I, O, 4, 4)`` shared by all positions."""
    _check_children(children, geom)
    if weights.shape != (geom.slots, geom.out_types, 4, 4):
        raise ShapeError(f"weights {weights.shape} do not match geometry "
                         f"({geom.slots}, {geom.out_types}, 4, 4)")
    rmap = build_routing_map(geom)
    poses, acts = tile_children(children, rmap)
    return VoteTensor(_transform(poses, weights), acts, tuple(geom.parent)), rmap


def class_geometry(children: CapsuleTensor, out_types: int) -> ConvGeometry:
    w, h = children.grid
    if w != h:
        raise ShapeError(f"class capsules expect a square child grid, got {children.grid}")
    return ConvGeometry(kernel=w, stride=1, in_types=children.types, out_types=out_types, child=(w, h))


def flatten_for_class_caps(children: CapsuleTensor, weights: Tensor,
                           coordinates: bool = True) -> tuple[VoteTensor, SpatialRoutingMap]:
    """Fully connect every child capsule to each class capsule.

    ``weights`` is ``(I, O, 4, 4)``: one matrix per (child type, class),
    shared across child positions.
    """
    geom = class_geometry(children, weights.shape[1])
    if weights.shape[0] != children.types or weights.shape[2:] != (4, 4):
        raise ShapeError(f"class weights {weights.shape} do not match {children.types} child types")
    rmap = build_routing_map(geom)
    poses, acts = tile_children(children, rmap)
    tiled_w = T.take(weights, np.tile(np.arange(children.types), geom.n_child), axis=0)
    votes = VoteTensor(_transform(poses, tiled_w), acts, (1, 1))
    if coordinates:
        votes = coordinate_addition(votes, children.grid, children.types)
    return votes, rmap


def coordinate_offsets(grid: tuple[int, int], types: int) -> np.ndarray:
    """``(slots, 16)`` offsets: cell-centre coordinates in components 0 and 1."""
    w, h = grid
    x, y = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    off = np.zeros((w * h, POSE))
    off[:, 0] = (x.ravel() + 0.5) / w
    off[:, 1] = (y.ravel() + 0.5) / h
    return np.repeat(off, types, axis=0)


def coordinate_addition(votes: VoteTensor, child_grid: tuple[int, int], types: int,
                        enabled: bool = True) -> VoteTensor:
    if not enabled:
        return votes
    off = coordinate_offsets(child_grid, types)
    if off.shape[0] != votes.votes.shape[2]:
        raise ShapeError(f"grid {child_grid} x {types} types does not match {votes.votes.shape[2]} vote slots")
    off = off[None, None, :, None, :].astype(votes.votes.dtype)
    return VoteTensor(votes.votes + off, votes.activations, votes.parent_grid)
