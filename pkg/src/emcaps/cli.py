"""``emcaps`` command line: train, eval, diagnose, prep-data, inspect, plot.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 diagnostic FAIL.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import experiment as X
from .diagnostics import FAIL, save_snapshots
from .network import format_plan
from .routing import NORMALIZATIONS
from .train import CheckpointError, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIAGNOSTIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _network_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--config", help="JSON file with network fields (a run's config.json also works)")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one network config field; repeatable")
    g.add_argument("--iterations", type=int, help="EM routing iterations (1, 2 or 3)")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--classes", type=int, help="number of output classes")
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--no-coordinate-addition", action="store_true")
    g.add_argument("--no-mean-data-scaling", action="store_true")
    g.add_argument("--ablate-normalization", choices=[n for n in NORMALIZATIONS if n != "positions"],
                   help="normalise E-step assignments over parent types only")
    g.add_argument("--ablate-epsilon", type=float, metavar="EPS",
                   help="replace the variance floor (0 reproduces the collapse)")


def _data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--source", choices=X.SOURCES, default="synthetic")
    g.add_argument("--data-dir", help="dataset directory (default: $EMCAPS_DATA)")
    g.add_argument("--n-train", type=int, default=512, help="synthetic training examples")
    g.add_argument("--n-test", type=int, default=256, help="synthetic test examples")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--rotation", type=float, default=30.0,
                   help="synthetic rotation half-range in degrees (180: rotation-heavy)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emcaps", description="Matrix capsules with EM routing.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a network and write metrics and checkpoints")
    _network_args(p)
    _data_args(p)
    p.add_argument("--out", required=True, help="output directory (locked while training)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="stop after this many steps (overrides --epochs)")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--eval-every", type=int, default=0, help="also evaluate every N steps")
    p.add_argument("--target-accuracy", type=float, help="stop once held-out accuracy reaches this")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints")
    p.add_argument("--no-augment", action="store_true", help="centre-crop training batches too")

    p = sub.add_parser("eval", help="test-set accuracy and confusion counts of a checkpoint")
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("diagnose", help="run the routing pitfall detectors")
    _network_args(p)
    _data_args(p)
    p.add_argument("--checkpoint", help="diagnose this checkpoint (default: fresh initialisation)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--adversarial", action="store_true", help="use the constructed single-child batch")
    p.add_argument("--dump", help="also save the routing snapshots here")
    p.add_argument("--from-dump", help="diagnose a saved snapshot dump instead of running the network")

    p = sub.add_parser("prep-data", help="write synthetic data files or audit smallNORB files")
    _network_args(p)
    _data_args(p)
    p.add_argument("--out", help="output directory for synthetic files")

    p = sub.add_parser("inspect", help="print the layer table")
    _network_args(p)

    p = sub.add_parser("plot", help="accuracy-vs-epoch SVG from epochs.csv files")
    p.add_argument("runs", nargs="+", help="run directories or epochs.csv files")
    p.add_argument("--out", required=True, help="output .svg path")
    return parser


def network_config(args) -> "X.NetworkConfig":
    overrides: dict = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise X.UsageError(f"cannot read --config: {e}") from None
        overrides.update(loaded.get("network", loaded))
    for text in args.overrides:
        key, value = X.parse_override(text)
        overrides[key] = value
    named = {"iterations": args.iterations, "batch_size": args.batch_size, "num_classes": args.classes,
             "dtype": args.dtype, "normalization": args.ablate_normalization,
             "epsilon": args.ablate_epsilon}
    overrides.update({k: v for k, v in named.items() if v is not None})
    if args.no_coordinate_addition:
        overrides["coordinate_addition"] = False
    if args.no_mean_data_scaling:
        overrides["mean_data_scaling"] = False
    return X.resolve_config(overrides)


def run_config(args) -> X.RunConfig:
    fields = {f: getattr(args, f) for f in
              ("source", "data_dir", "n_train", "n_test", "data_seed", "rotation", "seed", "out", "checkpoint",
               "steps", "epochs", "eval_every", "target_accuracy", "checkpoint_every", "batches")
              if getattr(args, f, None) is not None}
    if getattr(args, "no_augment", False):
        fields["augment"] = False
    fields["overrides"] = list(getattr(args, "overrides", []))
    return X.RunConfig(command=args.command, **fields)


def _train(args) -> int:
    config = network_config(args)
    print(f"config digest {config.digest()} batch={config.batch_size} lr={config.base_lr:g} "
          f"weight_decay={config.weight_decay:g} iterations={config.iterations}")
    try:
        summary = X.run_train(run_config(args), config)
    except TrainingDiverged as e:
        print(f"error: {e}; state written to {Path(args.out) / 'failure.npz'}", file=sys.stderr)
        return EXIT_NUMERIC
    print(X.summary_line(summary))
    return EXIT_OK


def _eval(args) -> int:
    report = X.run_eval(run_config(args))
    if args.json:
        print(json.dumps(report, sort_keys=True))
        return EXIT_OK
    print(f"iterations {report['iterations']}  step {report['step']}")
    print(f"accuracy {report['accuracy']:.4f} ({report['examples']} examples)")
    print("confusion (rows: true, columns: predicted)")
    for i, row in enumerate(report["confusion"]):
        print(f"  {i}: " + " ".join(f"{c:6d}" for c in row))
    return EXIT_OK


def _diagnose(args) -> int:
    config = network_config(args)
    result = X.run_diagnose(run_config(args), config, adversarial=args.adversarial, dump=args.from_dump)
    for f in result["findings"]:
        print(f.to_line())
    for layer, st in result["monitor"].items():
        print(f"monitor layer={layer} " + " ".join(f"{k}={v:.6g}" for k, v in st.items()))
    if args.dump:
        save_snapshots(args.dump, result["snapshots"])
    print(f"RESULT status={result['status']} iterations={result['iterations']} findings={len(result['findings'])}")
    return EXIT_DIAGNOSTIC if result["status"] == FAIL else EXIT_OK


def _prep(args) -> int:
    print(json.dumps(X.prepare_data(run_config(args), network_config(args)), sort_keys=True))
    return EXIT_OK


def _inspect(args) -> int:
    print(format_plan(network_config(args)))
    return EXIT_OK


def read_epochs(path: Path) -> list[dict]:
    path = path / "epochs.csv" if path.is_dir() else path
    if not path.exists():
        raise X.UsageError(f"no epochs.csv at {path}")
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _plot(args) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for run in args.runs:
        rows = read_epochs(Path(run))
        ax.plot([r["epoch"] for r in rows], [r["test_accuracy"] for r in rows], marker="o", label=Path(run).name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    plt.close(fig)
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "diagnose": _diagnose, "prep-data": _prep,
            "inspect": _inspect, "plot": _plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (X.UsageError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
