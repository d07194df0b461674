"""Run configuration and the train / eval / diagnose drivers behind the CLI.

Output directory layout written by :func:`run_train`::

    config.json        resolved run + network config and its digest
    steps.csv          one row per optimisation step
    epochs.csv         one row per epoch (held-out accuracy)
    checkpoints/       epoch-NNNN.npz, plus last.npz at the top level
    failure.npz        only when the loss went non-finite
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import tensor as T
from .diagnostics import (FAIL, Finding, argument_monitor, diagnose_snapshots, load_snapshots,
                          single_child_votes, worst)
from .network import NetworkConfig, forward, init_params, lambda_schedule
from .routing import RoutingNumericsError, RoutingParams, em_routing
from .train import (TrainingDiverged, TrainState, load_checkpoint, predict, save_checkpoint,
                    train_step, write_container)

SOURCES = ("synthetic", "smallnorb")
SYNTHETIC_FILES = {split: (f"synthetic-{split}-dat.mat", f"synthetic-{split}-cat.mat")
                   for split in ("train", "test")}


class UsageError(ValueError):
    """Bad user input; maps to exit code 1."""


@dataclass
class RunConfig:
    command: str
    source: str = "synthetic"
    data_dir: str | None = None
    n_train: int = 512
    n_test: int = 256
    data_seed: int = 0
    rotation: float = 30.0
    seed: int = 0
    out: str | None = None
    checkpoint: str | None = None
    steps: int | None = None
    epochs: int = 1
    eval_every: int = 0
    target_accuracy: float | None = None
    augment: bool = True
    checkpoint_every: int = 1
    batches: int = 1
    overrides: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_override(text: str) -> tuple[str, object]:
    """``KEY=VALUE`` with VALUE read as JSON when possible, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise UsageError(f"override {text!r} is not KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(overrides: dict, base: NetworkConfig | None = None) -> NetworkConfig:
    """Apply overrides on top of ``base``; every value is type-checked first."""
    merged = (base or NetworkConfig()).to_dict()
    merged.update(overrides)
    try:
        return NetworkConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid network config: {e}") from None


# ---------------------------------------------------------------------------
# datasets


def load_datasets(run: RunConfig, config: NetworkConfig) -> tuple[D.DatasetSplit, D.DatasetSplit]:
    if run.source not in SOURCES:
        raise UsageError(f"source must be one of {SOURCES}")
    root = D.data_root(run.data_dir)
    if run.source == "synthetic":
        if root is not None and (root / SYNTHETIC_FILES["train"][0]).exists():
            return tuple(D.load_split(*(root / f for f in SYNTHETIC_FILES[s]), s, "synthetic")
                         for s in ("train", "test"))
        return D.synthetic_splits(run.n_train, run.n_test, config.num_classes, run.data_seed,
                                  size=config.input_size, rotation=run.rotation)
    if root is None:
        raise UsageError("smallnorb needs --data-dir or EMCAPS_DATA")
    out = []
    for split in ("train", "test"):
        dat, cat, info = D.smallnorb_paths(root, split)
        if not dat.exists():
            raise UsageError(f"missing {dat}")
        out.append(D.load_smallnorb(dat, cat, info if info.exists() else None, split))
    return tuple(out)


def prepare_data(run: RunConfig, config: NetworkConfig) -> dict:
    """Write synthetic splits as binary matrices, or audit existing smallNORB files."""
    if run.source == "synthetic":
        if run.out is None:
            raise UsageError("prep-data for synthetic needs --out")
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        splits = D.synthetic_splits(run.n_train, run.n_test, config.num_classes, run.data_seed,
                                    size=config.input_size, rotation=run.rotation)
        for split in splits:
            D.write_split(split, *(out / f for f in SYNTHETIC_FILES[split.split]))
    else:
        splits = load_datasets(run, config)
    return {s.split: {"examples": len(s), "eyes": s.eyes, "image_shape": list(s.images.shape[1:]),
                      "labels": np.bincount(s.labels).tolist()} for s in splits}


def test_inputs(split: D.DatasetSplit, config: NetworkConfig) -> np.ndarray:
    return D.preprocess_batch(split.images, "test", size=config.input_size).astype(config.dtype)


# ---------------------------------------------------------------------------
# training


@contextmanager
def directory_lock(out: Path):
    path = out / "train.lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out} is in use by another training run ({path} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def step_columns(config: NetworkConfig) -> list[str]:
    return (["step", "epoch", "loss", "spread_loss", "accuracy", "lr", "margin"]
            + [f"lambda_{i}" for i in range(config.iterations)])


EPOCH_COLUMNS = ["epoch", "step", "train_accuracy", "test_accuracy"]


def accuracy(params, images, labels, config: NetworkConfig) -> float:
    return float(np.mean(predict(params, images, config).argmax(axis=1) == labels))


def _rngs(seed: int) -> tuple[int, np.random.Generator]:
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    return int(init_seq.generate_state(1)[0]), np.random.default_rng(shuffle_seq)


def fit(state: TrainState, train: D.DatasetSplit, test: D.DatasetSplit, config: NetworkConfig,
        run: RunConfig, rng: np.random.Generator,
        on_step: Callable[[dict], None] = lambda m: None,
        on_eval: Callable[[dict], None] = lambda m: None,
        on_epoch: Callable[[TrainState], None] = lambda s: None) -> tuple[TrainState, dict]:
    """Train for ``run.steps`` steps (or ``run.epochs`` epochs) of full shuffled batches.

    Held-out accuracy is measured at the end of each epoch and, when
    ``run.eval_every`` is set, every that many steps. Training stops early once
    ``run.target_accuracy`` is reached.
    """
    bs = config.batch_size
    per_epoch = len(train) // bs
    if per_epoch == 0:
        raise UsageError(f"batch size {bs} exceeds the {len(train)} training examples")
    total = run.steps if run.steps is not None else run.epochs * per_epoch
    x_test = test_inputs(test, config)
    summary = {"steps": 0, "best_test_accuracy": None, "test_accuracy": None, "reached_target_at": None}
    window: list[float] = []

    def evaluate(kind: str) -> bool:
        acc = accuracy(state.params, x_test, test.labels, config)
        summary["test_accuracy"] = acc
        summary["best_test_accuracy"] = max(acc, summary["best_test_accuracy"] or 0.0)
        on_eval({"kind": kind, "epoch": state.epoch, "step": state.step,
                 "train_accuracy": float(np.mean(window)) if window else float("nan"),
                 "test_accuracy": acc})
        if run.target_accuracy is not None and acc >= run.target_accuracy:
            summary["reached_target_at"] = state.step
            return True
        return False

    done = 0
    while done < total:
        order = rng.permutation(len(train))
        window = []
        for j in range(per_epoch):
            if done >= total:
                break
            idx = np.sort(order[j * bs:(j + 1) * bs])
            raw = train.images[idx]
            mode = "train" if run.augment else "test"
            x = D.preprocess_batch(raw, mode, rng, size=config.input_size).astype(config.dtype)
            state, metrics = train_step(state, x, train.labels[idx], config)
            metrics["epoch"] = state.epoch
            window.append(metrics["accuracy"])
            on_step(metrics)
            done += 1
            summary["steps"] = state.step
            if run.eval_every and state.step % run.eval_every == 0 and evaluate("step"):
                return state, summary
        if len(window) == per_epoch:
            state = dataclasses.replace(state, epoch=state.epoch + 1)
            on_epoch(state)
            if evaluate("epoch"):
                return state, summary
    return state, summary


def run_train(run: RunConfig, config: NetworkConfig, log=print) -> dict:
    if run.out is None:
        raise UsageError("train needs --out")
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    with directory_lock(out):
        init_seed, rng = _rngs(run.seed)
        if run.checkpoint:
            state, saved = load_checkpoint(run.checkpoint)
            if saved.digest() != config.digest():
                raise UsageError("checkpoint was trained with a different network config")
        else:
            state = TrainState.create(init_params(config, init_seed))
        (out / "config.json").write_text(json.dumps(
            {"run": run.to_dict(), "network": config.to_dict(), "digest": config.digest()},
            indent=2, sort_keys=True) + "\n")
        train, test = load_datasets(run, config)
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        with open(out / "steps.csv", "w", newline="") as fs, open(out / "epochs.csv", "w", newline="") as fe:
            steps_w = csv.DictWriter(fs, step_columns(config), extrasaction="ignore")
            epochs_w = csv.DictWriter(fe, EPOCH_COLUMNS, extrasaction="ignore")
            steps_w.writeheader()
            epochs_w.writeheader()

            def on_eval(m):
                if m["kind"] != "epoch":
                    log(f"step {m['step']} test_accuracy {m['test_accuracy']:.4f}")
                    return
                epochs_w.writerow(m)
                fe.flush()
                log(f"epoch {m['epoch']} step {m['step']} train_accuracy {m['train_accuracy']:.4f} "
                    f"test_accuracy {m['test_accuracy']:.4f}")

            def on_epoch(s):
                if run.checkpoint_every and s.epoch % run.checkpoint_every == 0:
                    save_checkpoint(ckdir / f"epoch-{s.epoch:04d}.npz", s, config)

            try:
                state, summary = fit(state, train, test, config, run, rng, steps_w.writerow, on_eval, on_epoch)
            except TrainingDiverged as e:
                write_container(out / "failure.npz",
                                {**{f"param/{k}": v for k, v in e.state.params.items()},
                                 "batch/images": e.images, "batch/labels": np.asarray(e.labels)},
                                {"kind": "failure", "step": e.state.step, "error": str(e),
                                 "config": config.to_dict()})
                raise
        save_checkpoint(out / "last.npz", state, config)
    if summary["test_accuracy"] is None:
        x_test = test_inputs(test, config)
        summary["test_accuracy"] = accuracy(state.params, x_test, test.labels, config)
    summary.update(digest=config.digest(), iterations=config.iterations, epoch=state.epoch,
                   seconds=round(time.perf_counter() - t0, 3))
    return summary


# ---------------------------------------------------------------------------
# evaluation


def confusion(pred: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    m = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(m, (labels, pred), 1)
    return m


def run_eval(run: RunConfig) -> dict:
    if not run.checkpoint:
        raise UsageError("eval needs --checkpoint")
    state, config = load_checkpoint(run.checkpoint)
    _, test = load_datasets(run, config)
    pred = predict(state.params, test_inputs(test, config), config).argmax(axis=1)
    cm = confusion(pred, test.labels, config.num_classes)
    return {"accuracy": float(np.trace(cm) / max(cm.sum(), 1)), "examples": int(cm.sum()),
            "iterations": config.iterations, "confusion": cm.tolist(), "step": state.step}


# ---------------------------------------------------------------------------
# diagnostics


def adversarial_trace(config: NetworkConfig, trace: list, n: int = 4, seed: int = 0) -> None:
    """Route the single-child probe under ``config``'s routing settings, snapshots into ``trace``."""
    votes, rmap = single_child_votes(n=n, batch=2, seed=seed)
    zeros = T.Tensor(np.zeros(n), dtype=T.get_default_dtype())
    params = RoutingParams(zeros, zeros, [lambda_schedule(i) for i in range(config.iterations)],
                           mean_data=rmap.geometry.mean_data, epsilon=config.epsilon,
                           scale_data=config.mean_data_scaling, normalization=config.normalization)
    em_routing(votes, rmap, params, trace, "probe")


def _numerics_finding(e: RoutingNumericsError) -> Finding:
    return Finding("numerics", e.layer, e.iteration, FAIL, "non-finite", {"tensor": e.tensor})


def run_diagnose(run: RunConfig, config: NetworkConfig, adversarial: bool = False,
                 dump: str | None = None) -> dict:
    """Findings for every routing layer and iteration, plus the argument monitor.

    Snapshots come from ``dump`` when given, else from a live forward pass. A
    routing numerics error becomes a FAIL finding; the snapshots gathered
    before it are still diagnosed.
    """
    trace: list = []
    failures: list[Finding] = []
    if dump is not None:
        trace = load_snapshots(dump)
    elif adversarial:
        try:
            adversarial_trace(config, trace, seed=run.seed)
        except RoutingNumericsError as e:
            failures.append(_numerics_finding(e))
    else:
        if run.checkpoint:
            state, config = load_checkpoint(run.checkpoint)
            params = state.params
        else:
            params = init_params(config, _rngs(run.seed)[0])
        _, test = load_datasets(run, config)
        x = test_inputs(test, config)
        bs = config.batch_size
        for i in range(run.batches):
            batch = x[i * bs:(i + 1) * bs]
            if len(batch) == 0:
                break
            try:
                forward(params, batch, config, trace)
            except RoutingNumericsError as e:
                failures.append(_numerics_finding(e))
    findings = diagnose_snapshots(trace) + failures
    return {"findings": findings, "monitor": argument_monitor(trace), "status": worst(findings),
            "snapshots": trace, "iterations": config.iterations}


def summary_line(summary: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v
    return "SUMMARY " + json.dumps({k: clean(v) for k, v in summary.items()}, sort_keys=True)
