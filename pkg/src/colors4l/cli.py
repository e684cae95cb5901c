"""Command-line entry point.

    colors4l convert             official dataset files -> CDS1 containers
    colors4l pretrain-colorizer  train and save <dataset>-<epochs>-color
    colors4l run                 budget x seed sweep, one JSON record per run
    colors4l report              mean±std tables (text + CSV) and loss plots

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ColorS4LError, ConfigError, DataError, NumericError

logger = logging.getLogger("colors4l")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

LIST_KEYS = {"budget", "seed"}
INT_KEYS = {"epochs", "batch", "limit"}
FLOAT_KEYS = {"omega", "lr", "width", "momentum", "weight_decay"}
CONFIG_KEYS = LIST_KEYS | INT_KEYS | FLOAT_KEYS | {"dataset", "data_dir", "arch", "colorizer", "out",
                                                    "checkpoint_dir"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. List keys take
    comma- or space-separated values."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key in LIST_KEYS:
                out[key] = [int(v) for v in value.replace(",", " ").split()]
            elif key in INT_KEYS:
                out[key] = int(value)
            elif key in FLOAT_KEYS:
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override its values")
    p.add_argument("--dataset", choices=["cifar10", "cifar100", "svhn"])
    p.add_argument("--data-dir", help="data root (default: $COLORS4L_DATA)")
    p.add_argument("--arch", choices=["convnet13", "wrn_28_4"])
    p.add_argument("--budget", type=int, action="append", help="label budget (repeatable)")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    p.add_argument("--omega", type=float, help="weight of the self-supervised loss")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--colorizer", help="colorizer checkpoint path")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="colors4l", description="Color-S4L semi-supervised training toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("convert", help="convert official dataset files to CDS1 containers")
    _shared(p)

    p = sub.add_parser("pretrain-colorizer", help="pretrain the colorization network")
    _shared(p)
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--limit", type=int, help="use only the first N training images")

    p = sub.add_parser("run", help="train and evaluate every (budget, seed) pair")
    _shared(p)
    p.add_argument("--lr", type=float, help="initial SGD learning rate (default 0.05)")
    p.add_argument("--width", type=float, help="backbone channel multiplier (default 1.0)")
    p.add_argument("--checkpoint-dir", help="write per-epoch checkpoints here")

    p = sub.add_parser("report", help="render result tables and loss plots")
    p.add_argument("results", nargs="?", help="results directory (default: --out or ./results)")
    _shared(p)
    return parser


def _merge(args: argparse.Namespace) -> dict:
    opts = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "command"):
            opts[key] = value
    return opts


def _data_root(opts):
    from .data import default_data_root

    return Path(opts["data_dir"]) if opts.get("data_dir") else default_data_root()


def cmd_convert(opts) -> int:
    from .data import load_cifar10, load_cifar100, write_container

    dataset = opts.get("dataset")
    if dataset is None:
        raise UsageError("convert: --dataset is required")
    src = _data_root(opts)
    out = Path(opts.get("out") or src) / dataset
    if dataset == "cifar10":
        train, test = load_cifar10(src)
        parts = {"train": (train.images, train.labels), "test": (test.images, test.labels)}
    elif dataset == "cifar100":
        train, test = load_cifar100(src)
        parts = {"train": (train.images, train.labels), "test": (test.images, test.labels)}
    else:
        parts = {name: read_svhn_mat(src / f"{name}_32x32.mat") for name in ("train", "test")}
    for name, (images, labels) in parts.items():
        path = write_container(out / f"{name}.cds", images, labels)
        print(f"wrote {path} ({len(images)} images)")
    return EXIT_OK


def read_svhn_mat(path):
    """Images and labels from an official SVHN ``*_32x32.mat`` file; digit 0
    is stored as label 10 there and mapped back to 0."""
    from scipy.io import loadmat

    if not Path(path).is_file():
        raise DataError(f"missing SVHN file {path}")
    try:
        mat = loadmat(path)
        x, y = mat["X"], mat["y"]
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: not a readable SVHN .mat file ({exc})") from exc
    if x.ndim != 4 or x.shape[:3] != (32, 32, 3):
        raise DataError(f"{path}: X has shape {x.shape}, expected 32 x 32 x 3 x N")
    labels = y.reshape(-1).astype(np.int64)
    labels[labels == 10] = 0
    if len(labels) != x.shape[3] or labels.min(initial=0) < 0 or labels.max(initial=0) > 9:
        raise DataError(f"{path}: labels do not match the images or fall outside 1..10")
    images = np.ascontiguousarray(x.transpose(3, 0, 1, 2)).astype(np.uint8)
    return images, labels


def cmd_pretrain_colorizer(opts) -> int:
    from .colorizer import ColorizerConfig, colorizer_filename, save_colorizer, train_colorizer
    from .data import load_dataset

    dataset = opts.get("dataset")
    if dataset is None:
        raise UsageError("pretrain-colorizer: --dataset is required")
    seeds = opts.get("seed") or [0]
    if len(seeds) != 1:
        raise UsageError("pretrain-colorizer takes a single --seed")
    config = ColorizerConfig(epochs=opts.get("epochs", 100), batch=opts.get("batch", 64),
                             learning_rate=opts.get("lr", 1e-3), seed=seeds[0])
    train, _ = load_dataset(dataset, _data_root(opts))
    images = train.images[: opts["limit"]] if opts.get("limit") else train.images

    model = train_colorizer(images, config, dataset=dataset, log_every_epoch=False)
    for epoch, loss in enumerate(model.metadata["loss_history"], 1):
        print(f"epoch {epoch} loss {loss:.6f}")
    path = Path(opts.get("out") or ".") / colorizer_filename(dataset, config.epochs)
    save_colorizer(model, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(opts) -> int:
    from .experiment import ExperimentSpec, run_experiment
    from .report import write_report

    if opts.get("dataset") is None:
        raise UsageError("run: --dataset is required")
    if not opts.get("budget"):
        raise UsageError("run: at least one --budget is required")
    if not opts.get("seed"):
        raise UsageError("run: at least one --seed is required")
    overrides = {k: opts[k] for k in ("omega", "epochs", "batch", "lr", "width") if k in opts}
    spec = ExperimentSpec(
        dataset=opts["dataset"],
        budgets=list(opts["budget"]),
        seeds=list(opts["seed"]),
        arch=opts.get("arch", "convnet13"),
        colorizer=opts.get("colorizer"),
        overrides=overrides,
        out=opts.get("out", "results"),
        data_dir=str(_data_root(opts)),
    )
    records = run_experiment(spec, checkpoint_root=opts.get("checkpoint_dir"))
    failed = [r for r in records if r["status"] != "ok"]
    for r in records:
        status = f"error {100 * r['error_rate']:.2f}%" if r["status"] == "ok" else f"FAILED: {r['error']}"
        print(f"{r['method']} {r['arch']} {r['budget']}L seed {r['seed']}: {status}")
    if len(failed) < len(records):
        _, text = write_report(spec.out, plots=False)
        print(text, end="")
    if failed:
        return max(r.get("exit_code", EXIT_DATA) for r in failed)
    return EXIT_OK


def cmd_report(opts) -> int:
    from .report import write_report

    results = opts.get("results") or opts.get("out") or "results"
    out = opts.get("out") or results
    _, text = write_report(results, out, budgets=opts.get("budget"))
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "convert": cmd_convert,
    "pretrain-colorizer": cmd_pretrain_colorizer,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("colors4l: a command is required (convert, pretrain-colorizer, run, report)")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        opts = _merge(args)
        return COMMANDS[args.command](opts)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ColorS4LError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
