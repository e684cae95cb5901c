"""Joint supervised / self-supervised training loop, evaluation, seed
aggregation and checkpointing.

Every random draw of a run is a pure function of ``(seed, step)``, so a run
resumed from a checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import container
from .data import (
    STREAM_AUGMENT,
    STREAM_DROPOUT,
    STREAM_PROXY,
    BatchPair,
    DatasetSplit,
    LabeledSet,
    allows_flip,
    augment_labeled,
    channel_stats,
    labeled_indices,
    normalize,
    rng_for,
    steps_per_epoch,
    to_float,
    unlabeled_indices,
)
from .errors import CheckpointError, ConfigError, ContractError, DataError, IncompatibleCheckpointError
from .model import DualHeadModel, OptimState, build_model, cross_entropy, forward, gradients, sgd_step
from .pretext import ProxyBatch, sample_proxy_batch

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "trainer"


@dataclass
class TrainConfig:
    omega: float = 1.0
    batch: int = 128
    epochs: int = 30
    arch: str = "convnet13"
    dataset: str = "cifar10"
    budget: int = 1000
    colorizer: str | None = None
    seed: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    width: float = 1.0
    augment: bool = True
    supervised_only: bool = False

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError(f"omega must be non-negative, got {self.omega}")
        if self.batch < 1:
            raise ConfigError(f"batch must be at least 1, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossReport:
    l_super: float
    l_self: float
    total: float
    step: int


@dataclass
class EvalReport:
    per_seed: list
    mean: float
    std: float
    config: dict = field(default_factory=dict)

    @property
    def error_rate(self) -> float:
        return self.mean

    @property
    def cell(self) -> str:
        return format_cell(self.mean, self.std)


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    model_state: dict
    optim: OptimState
    norm_mean: np.ndarray
    norm_std: np.ndarray
    rng: dict


@dataclass
class TrainResult:
    model: DualHeadModel
    trace: list
    optim: OptimState
    checkpoints: list
    norm_mean: np.ndarray
    norm_std: np.ndarray


def to_input(images, mean=None, std=None, dtype=torch.float32) -> torch.Tensor:
    """NHWC numpy (uint8 or float) -> normalized NCHW tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    x = to_float(images) if images.dtype == np.uint8 else np.asarray(images, np.float32)
    if mean is not None:
        x = normalize(x, mean, std)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(dtype)


def _param_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def composite_loss(model, pair: BatchPair, proxy: ProxyBatch | None, omega: float):
    """``(l_super, l_self, total)`` tensors of the weighted two-branch loss.

    With ``omega == 0`` the self-supervised loss is only measured, in
    inference mode and outside the graph, so it neither moves parameters
    nor disturbs batch-norm statistics or the dropout stream.
    """
    dtype = _param_dtype(model)
    x_l = to_input(pair.labeled_images, dtype=dtype)
    y_l = torch.as_tensor(pair.labels, dtype=torch.long)
    l_super = cross_entropy(forward(model, x_l, "super"), y_l)
    if proxy is None:
        zero = torch.zeros((), dtype=dtype)
        return l_super, zero, l_super
    x_p = to_input(proxy.images, dtype=dtype)
    y_p = torch.as_tensor(proxy.labels, dtype=torch.long)
    if omega == 0:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            l_self = cross_entropy(forward(model, x_p, "self"), y_p)
        model.train(was_training)
        return l_super, l_self, l_super
    l_self = cross_entropy(forward(model, x_p, "self"), y_p)
    return l_super, l_self, l_super + omega * l_self


def train_step(model, pair: BatchPair, proxy: ProxyBatch | None, config: TrainConfig,
               optim: OptimState) -> LossReport:
    """One optimizer update on the weighted loss of a labeled/proxy batch pair.

    Inputs must already be normalized. ``proxy=None`` means supervised-only.
    """
    b = len(pair.labels)
    sizes = {"labeled": len(pair.labeled_images), "labels": b, "unlabeled": len(pair.unlabeled_images)}
    if proxy is not None:
        sizes.update(proxy=len(proxy.images), proxy_labels=len(proxy.labels))
    if len(set(sizes.values())) != 1:
        raise ContractError(f"batch-size mismatch: {sizes}")
    model.train()
    l_super, l_self, total = composite_loss(model, pair, proxy, config.omega)
    grads = gradients(model, total)
    sgd_step(model, grads, optim)
    return LossReport(l_super.item(), l_self.item(), total.item(), optim.step)


def total_steps(split: DatasetSplit, config: TrainConfig) -> int:
    return config.epochs * steps_per_epoch(len(split.unlabeled), config.batch)


def _dropout_seed(seed: int, step: int) -> int:
    return int(rng_for(seed, STREAM_DROPOUT, step).integers(2 ** 62))


def step_batches(split: DatasetSplit, config: TrainConfig, step: int, colorizer,
                 mean, std) -> tuple[BatchPair, ProxyBatch | None]:
    """Normalized labeled batch and proxy batch for global ``step``."""
    b, seed = config.batch, config.seed
    idx = labeled_indices(len(split.labeled), b, seed, step)
    x_l = to_float(split.labeled.images[idx])
    if config.augment:
        rng = rng_for(seed, STREAM_AUGMENT, step)
        flip = allows_flip(config.dataset)
        x_l = np.stack([augment_labeled(img, rng, allow_flip=flip) for img in x_l])
    x_l = normalize(x_l, mean, std)
    u_idx = unlabeled_indices(len(split.unlabeled), b, seed, step)
    x_u = split.unlabeled[u_idx]
    proxy = None
    if not config.supervised_only:
        proxy = sample_proxy_batch(x_u, rng_for(seed, STREAM_PROXY, step), colorizer)
        proxy = ProxyBatch(normalize(proxy.images, mean, std), proxy.labels)
    return BatchPair(x_l, split.labeled.labels[idx], x_u), proxy


def train_loop(split: DatasetSplit, config: TrainConfig, colorizer=None, *,
               resume: Checkpoint | str | Path | None = None,
               stop_at: int | None = None,
               checkpoint_dir: str | Path | None = None,
               checkpoint_every: int | None = None,
               on_step: Callable[[LossReport], None] | None = None,
               log_every: int = 100) -> TrainResult:
    """Train a dual-head model on ``split``.

    One epoch is one pass over the unlabeled pool; the labeled set is cycled
    as often as needed. A checkpoint is written at the end of every epoch
    (and every ``checkpoint_every`` steps) when ``checkpoint_dir`` is given.
    ``stop_at`` ends the run early at that global step.
    """
    if len(split.labeled) == 0:
        raise DataError("the labeled set is empty")
    if not config.supervised_only and colorizer is None:
        if config.colorizer is None:
            raise ConfigError("proxy sampling needs a colorizer; set `colorizer` in the config")
        from .colorizer import load_colorizer

        colorizer = load_colorizer(config.colorizer)

    n_steps = total_steps(split, config)
    per_epoch = steps_per_epoch(len(split.unlabeled), config.batch)
    if isinstance(resume, (str, Path)):
        resume = load_checkpoint(resume)

    model = build_model(config.arch, split.num_classes, seed=config.seed, width=config.width)
    optim = OptimState(lr0=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
                       total_steps=n_steps)
    if resume is not None:
        restore(resume, model, optim)
        mean, std = resume.norm_mean, resume.norm_std
        start = resume.step
    else:
        mean, std = channel_stats(split.unlabeled)
        start = 0
    end = n_steps if stop_at is None else min(stop_at, n_steps)

    trace, written = [], []
    for step in range(start, end):
        pair, proxy = step_batches(split, config, step, colorizer, mean, std)
        torch.manual_seed(_dropout_seed(config.seed, step))
        report = train_step(model, pair, proxy, config, optim)
        trace.append(report)
        if on_step is not None:
            on_step(report)
        if log_every and report.step % log_every == 0:
            logger.info("step %d/%d l_super %.4f l_self %.4f total %.4f lr %.5f", report.step,
                        n_steps, report.l_super, report.l_self, report.total, optim.lr)
        done = step + 1
        due = done % per_epoch == 0 or (checkpoint_every and done % checkpoint_every == 0)
        if checkpoint_dir is not None and due:
            ckpt = make_checkpoint(model, optim, config, mean, std)
            written.append(save_checkpoint(ckpt, Path(checkpoint_dir) / f"step{done:07d}.csl"))
    model.eval()
    return TrainResult(model, trace, optim, written, mean, std)


# --------------------------------------------------------------------------
# Evaluation


def error_rate_from_logits(logits, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) misses the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty test set")
    return float(np.mean(np.argmax(logits, axis=1) != labels))


def predict_logits(model, images: np.ndarray, mean, std, batch: int = 500) -> np.ndarray:
    model.eval()
    dtype = _param_dtype(model)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = to_input(images[i:i + batch], mean, std, dtype=dtype)
            out.append(forward(model, x, "super").numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model, test: LabeledSet, mean, std, batch: int = 500) -> float:
    """Test error rate of the supervised head in inference mode."""
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    return error_rate_from_logits(predict_logits(model, test.images, mean, std, batch), test.labels)


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def aggregate_runs(errors, config: dict | None = None) -> EvalReport:
    """Mean and population standard deviation of per-seed error rates."""
    errors = [float(e) for e in errors]
    if not errors:
        raise ConfigError("aggregate_runs needs at least one run")
    arr = np.asarray(errors)
    return EvalReport(errors, float(arr.mean()), float(arr.std()), dict(config or {}))


# --------------------------------------------------------------------------
# Checkpoints


def make_checkpoint(model, optim: OptimState, config: TrainConfig, mean, std) -> Checkpoint:
    return Checkpoint(
        config=config,
        step=optim.step,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optim=dataclasses.replace(optim, buffers={k: v.clone() for k, v in optim.buffers.items()}),
        norm_mean=np.asarray(mean, np.float32),
        norm_std=np.asarray(std, np.float32),
        rng={"seed": config.seed, "step": optim.step},
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    meta = {
        "kind": CHECKPOINT_KIND,
        "arch": ckpt.config.arch,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rng": ckpt.rng,
        "optim": {
            "lr0": ckpt.optim.lr0,
            "momentum": ckpt.optim.momentum,
            "weight_decay": ckpt.optim.weight_decay,
            "total_steps": ckpt.optim.total_steps,
            "step": ckpt.optim.step,
        },
    }
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    tensors.update({f"optim/{k}": v for k, v in ckpt.optim.buffers.items()})
    tensors["norm/mean"] = torch.from_numpy(ckpt.norm_mean)
    tensors["norm/std"] = torch.from_numpy(ckpt.norm_std)
    return container.save(path, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = container.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    try:
        config = TrainConfig.from_dict(meta["config"])
        optim = OptimState(**meta["optim"])
        optim.buffers = {k[6:]: v for k, v in tensors.items() if k.startswith("optim/")}
        return Checkpoint(
            config=config,
            step=int(meta["step"]),
            model_state={k[6:]: v for k, v in tensors.items() if k.startswith("model/")},
            optim=optim,
            norm_mean=tensors["norm/mean"].numpy(),
            norm_std=tensors["norm/std"].numpy(),
            rng=meta.get("rng", {}),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint ({exc})") from exc


def restore(ckpt: Checkpoint, model: DualHeadModel, optim: OptimState | None = None) -> None:
    """Load checkpoint state into ``model`` (and ``optim``) in place."""
    if ckpt.config.arch != model.arch:
        raise IncompatibleCheckpointError(
            f"checkpoint was written for arch {ckpt.config.arch!r}, model is {model.arch!r}"
        )
    try:
        model.load_state_dict(ckpt.model_state, strict=True)
    except RuntimeError as exc:
        raise IncompatibleCheckpointError(f"checkpoint tensors do not fit the model: {exc}") from exc
    if optim is not None:
        optim.step = ckpt.optim.step
        optim.buffers = {k: v.clone() for k, v in ckpt.optim.buffers.items()}
        if optim.total_steps != ckpt.optim.total_steps:
            raise IncompatibleCheckpointError(
                f"checkpoint schedule spans {ckpt.optim.total_steps} steps, run expects {optim.total_steps}"
            )


def model_from_checkpoint(ckpt: Checkpoint, num_classes: int) -> DualHeadModel:
    model = build_model(ckpt.config.arch, num_classes, seed=ckpt.config.seed, width=ckpt.config.width)
    restore(ckpt, model)
    return model
