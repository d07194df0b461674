"""Pitfall detectors over routing snapshots.

Each detector is a pure function of a :class:`~emcaps.routing.RoutingSnapshot`
and returns a :class:`Finding`. Findings render as one ``key=value`` record
per line so the CLI can print or export them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvGeometry, VoteTensor, build_routing_map
from .routing import EPSILON, RoutingSnapshot
from .train import read_container, write_container

PASS, WARN, FAIL = "PASS", "WARN", "FAIL"
USEFUL_RANGE = (-5.0, 5.0)


@dataclass
class Finding:
    check: str
    layer: str
    iteration: int
    status: str
    signature: str = ""
    details: dict = field(default_factory=dict)

    def to_line(self) -> str:
        parts = [f"check={self.check}", f"layer={self.layer}", f"iter={self.iteration}",
                 f"status={self.status}"]
        if self.signature:
            parts.append(f"signature={self.signature}")
        for k, v in self.details.items():
            parts.append(f"{k}={_fmt(v)}")
        return " ".join(parts)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v).replace(" ", "_")


def child_index(routing_map: np.ndarray) -> np.ndarray:
    """``(P, K*K)`` child position behind each tiled kernel offset."""
    kk = int(routing_map[0].sum())
    return np.nonzero(routing_map)[1].reshape(routing_map.shape[0], kk)


def child_totals(R: np.ndarray, routing_map: np.ndarray, in_types: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum of assignments over every connected (position, type) parent, per child.

    Returns totals ``(b, C, I)`` and a mask of children that appear in any window.
    """
    b, p, s, o = R.shape
    idx = child_index(routing_map).ravel()
    per = R.sum(axis=-1).reshape(b, idx.size, in_types)
    totals = np.zeros((b, routing_map.shape[1], in_types))
    np.add.at(totals, (slice(None), idx), per)
    covered = routing_map.sum(axis=0) > 0
    return totals, covered


def detect_single_child(snap: RoutingSnapshot, dominance: float = 0.9, max_data: float = 1.5,
                        floor: float = EPSILON) -> Finding:
    """Flag parents fed essentially by one child, and check the variance floor holds."""
    dominant = (snap.R > dominance).sum(axis=2)                     # (b, P, O)
    flagged = (dominant == 1) & (snap.data < max_data)
    finite = bool(np.all(np.isfinite(snap.sigma_sq)))
    min_var = float(np.nanmin(snap.sigma_sq)) if snap.sigma_sq.size else float("nan")
    n_flag = int(flagged.sum())
    details = {"flagged": n_flag, "parents": int(flagged.size), "min_sigma_sq": min_var,
               "floor_binding": bool(n_flag and snap.epsilon > 0 and np.isclose(min_var, snap.epsilon, rtol=1e-3, atol=0.0)),
               "epsilon": float(snap.epsilon)}
    if not finite or (n_flag and min_var < floor):
        return Finding("single_child", snap.layer, snap.iteration, FAIL, "variance-collapse", details)
    if n_flag:
        return Finding("single_child", snap.layer, snap.iteration, WARN, "single-child-parents", details)
    return Finding("single_child", snap.layer, snap.iteration, PASS, "", details)


def check_normalization_axes(snap: RoutingSnapshot, routing_map: np.ndarray | None = None,
                             tol: float = 1e-4) -> Finding:
    """Every child's assignments must total 1 over parent positions and types."""
    rm = snap.routing_map if routing_map is None else np.asarray(routing_map)
    totals, covered = child_totals(snap.R, rm, snap.in_types)
    t = totals[:, covered]
    degree = rm.sum(axis=0)[covered]
    details = {"min_total": float(t.min()), "max_total": float(t.max()), "positions": int(rm.shape[0])}
    if rm.shape[0] == 1:
        details["note"] = "single parent position: types-only and full normalization coincide"
    if np.all(np.abs(t - 1.0) <= tol):
        return Finding("normalization", snap.layer, snap.iteration, PASS, "", details)
    if np.allclose(t, degree[None, :, None], atol=tol):
        return Finding("normalization", snap.layer, snap.iteration, FAIL, "positions-not-normalized", details)
    return Finding("normalization", snap.layer, snap.iteration, FAIL, "unnormalized", details)


def argument_stats(argument: np.ndarray) -> dict:
    a = np.asarray(argument, dtype=np.float64).ravel()
    lo, med, hi = np.percentile(a, [5, 50, 95])
    return {"median": float(med), "p05": float(lo), "p95": float(hi), "width": float(hi - lo),
            "median_abs": float(np.median(np.abs(a)))}


def logistic_range_report(snap: RoutingSnapshot, min_width: float = 0.1) -> Finding:
    """Where the parent-activation logistic is being driven (operating point health)."""
    st = argument_stats(snap.argument)
    lo, hi = USEFUL_RANGE
    if st["p95"] < lo or st["p05"] > hi:
        return Finding("logistic_range", snap.layer, snap.iteration, WARN, "saturated", st)
    if st["width"] < min_width:
        return Finding("logistic_range", snap.layer, snap.iteration, WARN,
                       "no deviation from operating point", st)
    return Finding("logistic_range", snap.layer, snap.iteration, PASS, "", st)


def final_snapshots(snapshots) -> dict[str, RoutingSnapshot]:
    """Last routing iteration of each layer, in first-seen order."""
    out: dict[str, RoutingSnapshot] = {}
    for s in snapshots:
        if s.layer not in out or s.iteration >= out[s.layer].iteration:
            out[s.layer] = s
    return out


def argument_monitor(snapshots) -> dict[str, dict]:
    """Per-layer statistics of the final-iteration logistic arguments."""
    return {layer: argument_stats(s.argument) for layer, s in final_snapshots(snapshots).items()}


def argument_scale_report(snapshots, max_ratio: float = 10.0) -> list[Finding]:
    """Compare each layer's final median |argument| with the median over the other layers.

    Layers whose operating points sit an order of magnitude apart cannot
    share one set of beta initial values; unscaled assignment data at the
    fully connected layer is the usual cause.
    """
    stats = argument_monitor(snapshots)
    if len(stats) < 2:
        return []
    out = []
    finals = final_snapshots(snapshots)
    for layer, st in stats.items():
        others = [v["median_abs"] for k, v in stats.items() if k != layer]
        ref = float(np.median(others))
        ratio = st["median_abs"] / ref if ref > 0 else float("inf")
        details = {"median_abs": st["median_abs"], "others_median_abs": ref, "ratio": ratio}
        status, sig = (WARN, "operating-point-mismatch") if ratio >= max_ratio else (PASS, "")
        out.append(Finding("argument_scale", layer, finals[layer].iteration, status, sig, details))
    return out


def diagnose_snapshots(snapshots) -> list[Finding]:
    findings = []
    for s in snapshots:
        findings.append(detect_single_child(s))
        findings.append(check_normalization_axes(s))
        findings.append(logistic_range_report(s))
    return findings + argument_scale_report(snapshots)


def worst(findings) -> str:
    statuses = {f.status for f in findings}
    return FAIL if FAIL in statuses else WARN if WARN in statuses else PASS


# ---------------------------------------------------------------------------
# snapshot dumps (same container as checkpoints)

_ARRAYS = ("R", "mu", "sigma_sq", "a_parent", "argument", "data", "routing_map")


def save_snapshots(path, snapshots) -> None:
    arrays, records = {}, []
    for i, s in enumerate(snapshots):
        for name in _ARRAYS:
            arrays[f"{i:04d}/{name}"] = np.asarray(getattr(s, name))
        records.append({"layer": s.layer, "iteration": s.iteration, "in_types": s.in_types,
                        "epsilon": s.epsilon, "meta": s.meta})
    write_container(path, arrays, {"kind": "snapshots", "records": records})


def load_snapshots(path) -> list[RoutingSnapshot]:
    arrays, meta = read_container(path)
    if meta.get("kind") != "snapshots":
        raise ValueError(f"{path} is not a snapshot dump")
    return [RoutingSnapshot(layer=r["layer"], iteration=r["iteration"], in_types=r["in_types"],
                            epsilon=r["epsilon"], meta=r["meta"],
                            **{name: arrays[f"{i:04d}/{name}"] for name in _ARRAYS})
            for i, r in enumerate(meta["records"])]


# ---------------------------------------------------------------------------
# adversarial probe


def single_child_votes(n: int = 4, batch: int = 1, spread: float = 10.0, seed: int = 0):
    """Votes that drive a fully connected ``n`` -> ``n`` layer into one child per parent.

    Child ``j`` votes near ``c_j`` for parent ``j`` and far away (random
    direction, length ``spread``) for every other parent. With equal child and
    parent counts each parent ends up owning a single child after a couple of
    EM iterations.
    """
    rng = np.random.default_rng(seed)
    geom = ConvGeometry(kernel=1, stride=1, in_types=n, out_types=n, child=(1, 1))
    centres = rng.normal(0.0, 1.0, (batch, 1, n, 16))                # per parent
    far = rng.normal(0.0, 1.0, (batch, n, n, 16))                     # (child, parent)
    far *= spread / np.linalg.norm(far, axis=-1, keepdims=True)
    votes = centres + (1.0 - np.eye(n))[None, :, :, None] * far
    votes = votes.reshape(batch, 1, n, n, 16)
    acts = np.ones((batch, 1, n))
    dtype = T.get_default_dtype()
    return (VoteTensor(T.Tensor(votes, dtype=dtype), T.Tensor(acts, dtype=dtype), (1, 1)),
            build_routing_map(geom))
