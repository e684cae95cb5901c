"""Label-budget x seed experiment sweeps that persist one record per run."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colorizer import DEFAULT_PAIRING, colorizer_filename, load_colorizer
from .data import NUM_CLASSES, load_dataset, make_split
from .errors import ColorS4LError, ConfigError
from .report import append_record, method_name
from .trainer import TrainConfig, evaluate, train_loop

logger = logging.getLogger(__name__)


@dataclass
class ExperimentSpec:
    dataset: str
    budgets: list
    seeds: list
    arch: str = "convnet13"
    colorizer: str | None = None
    overrides: dict = field(default_factory=dict)
    out: str = "results"
    data_dir: str | None = None

    def __post_init__(self):
        if not self.budgets:
            raise ConfigError("at least one label budget is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.dataset not in NUM_CLASSES:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(self.overrides) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")


def find_default_colorizer(dataset: str, *dirs) -> Path | None:
    source, epochs = DEFAULT_PAIRING[dataset]
    name = colorizer_filename(source, epochs)
    for d in dirs:
        if d is not None and (Path(d) / name).is_file():
            return Path(d) / name
    return None


def summarize_trace(trace) -> dict:
    totals = [r.total for r in trace]
    return {
        "steps": len(trace),
        "first_total": totals[0] if totals else None,
        "last_total": totals[-1] if totals else None,
        "min_total": min(totals) if totals else None,
        "last_l_super": trace[-1].l_super if trace else None,
        "last_l_self": trace[-1].l_self if trace else None,
    }


def run_experiment(spec: ExperimentSpec, train=None, test=None, colorizer=None,
                   checkpoint_root=None) -> list[dict]:
    """Train and evaluate every (budget, seed) cell and append its record.

    A failing cell is recorded with ``status: "failed"`` and the sweep moves on.
    """
    if train is None or test is None:
        train, test = load_dataset(spec.dataset, spec.data_dir)
    for b in spec.budgets:
        if b > len(train):
            raise ConfigError(f"budget {b} exceeds the {len(train)} training images of {spec.dataset}")
    omega = spec.overrides.get("omega", TrainConfig.omega)
    supervised_only = spec.overrides.get("supervised_only", False)
    colorizer_path = spec.colorizer
    if colorizer is None and not supervised_only:
        if colorizer_path is None:
            found = find_default_colorizer(spec.dataset, spec.data_dir, spec.out)
            if found is None:
                source, epochs = DEFAULT_PAIRING[spec.dataset]
                raise ConfigError(
                    f"no colorizer given and default {colorizer_filename(source, epochs)!r} not found; "
                    "pass --colorizer or run `colors4l pretrain-colorizer`"
                )
            colorizer_path = str(found)
        colorizer = load_colorizer(colorizer_path)

    records = []
    k = NUM_CLASSES[spec.dataset]
    for budget in spec.budgets:
        for seed in spec.seeds:
            config = TrainConfig(**{**spec.overrides, "dataset": spec.dataset, "arch": spec.arch,
                                    "budget": budget, "seed": seed, "colorizer": colorizer_path})
            record = {
                "dataset": spec.dataset,
                "arch": spec.arch,
                "method": method_name(0.0 if config.supervised_only else config.omega),
                "budget": budget,
                "seed": seed,
                "omega": config.omega,
                "config": config.to_dict(),
            }
            started = time.time()
            try:
                split = make_split(train, budget, seed, test=test, num_classes=k)
                ckpt_dir = None
                if checkpoint_root is not None:
                    ckpt_dir = Path(checkpoint_root) / f"{spec.dataset}_{spec.arch}_{budget}L_seed{seed}"
                result = train_loop(split, config, colorizer, checkpoint_dir=ckpt_dir)
                error = evaluate(result.model, split.test, result.norm_mean, result.norm_std)
                record.update(
                    status="ok",
                    error_rate=error,
                    loss_summary=summarize_trace(result.trace),
                    loss_trace={
                        "total": [r.total for r in result.trace],
                        "l_super": [r.l_super for r in result.trace],
                        "l_self": [r.l_self for r in result.trace],
                    },
                )
                logger.info("%s budget=%d seed=%d error=%.4f", record["method"], budget, seed, error)
            except ColorS4LError as exc:
                logger.error("run budget=%d seed=%d failed: %s", budget, seed, exc)
                record.update(status="failed", error=str(exc), error_kind=type(exc).__name__,
                              exit_code=exc.exit_code)
            record["seconds"] = round(time.time() - started, 3)
            append_record(spec.out, record)
            records.append(record)
    return records


def mean_error(records: list[dict]) -> float:
    return float(np.mean([r["error_rate"] for r in records if r.get("status") == "ok"]))
