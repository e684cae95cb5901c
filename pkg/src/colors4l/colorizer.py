"""Encoder-decoder colorization network used to synthesize the colorized
proxy class.

The network maps a luminance image to RGB. It is pretrained on a dataset's
own images (grayscale in, original colors as target) and frozen afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import CheckpointError, ConfigError, ContractError, DataError, NumericError
from .pretext import grayscale_batch

logger = logging.getLogger(__name__)

KIND = "colorizer"
# Keeps outputs strictly inside (0, 1) even where the sigmoid saturates in f32.
OUTPUT_EPS = 1e-6


@dataclass
class ColorizerConfig:
    epochs: int = 100
    batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


class Colorizer(nn.Module):
    def __init__(self, widths=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = widths
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c3, c2, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c2, c1, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c1, c1, 3, padding=1), nn.ReLU(),
        )
        self.to_rgb = nn.Conv2d(c1, 3, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.metadata: dict = {"dataset": None, "epochs": 0, "loss_history": []}

    def forward(self, gray: torch.Tensor) -> torch.Tensor:
        if gray.shape[1] != 1:
            raise ContractError(f"colorizer expects 1 input channel, got {gray.shape[1]}")
        if gray.shape[2] % 8 or gray.shape[3] % 8:
            raise ContractError(f"colorizer needs spatial dims divisible by 8, got {tuple(gray.shape[2:])}")
        h = self.decoder(self.encoder(gray))
        return torch.sigmoid(self.to_rgb(h)).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS)


def build_colorizer(seed: int = 0, dtype=torch.float32) -> Colorizer:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Colorizer().to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def colorizer_forward(params: Colorizer, gray_batch) -> np.ndarray:
    """Colorize a ``B x H x W x 1`` float batch in [0, 1]; returns ``B x H x W x 3``."""
    gray = np.asarray(gray_batch, dtype=np.float32)
    if gray.ndim != 4 or gray.shape[-1] != 1:
        raise ContractError(f"expected B x H x W x 1 grayscale batch, got shape {gray.shape}")
    dtype = next(params.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(gray.transpose(0, 3, 1, 2))).to(dtype)
    was_training = params.training
    params.eval()
    with torch.no_grad():
        out = params(x)
    params.train(was_training)
    return out.permute(0, 2, 3, 1).to(torch.float32).numpy()


def colorizer_loss(pred, target):
    """Mean squared error over all elements; works on tensors and arrays."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor):
        return F.mse_loss(pred, target)
    diff = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return float(np.mean(diff ** 2))


def _gray_tensor(images_f32: np.ndarray) -> torch.Tensor:
    gray = grayscale_batch(images_f32)
    return torch.from_numpy(np.ascontiguousarray(gray.transpose(0, 3, 1, 2)))


def _rgb_tensor(images_f32: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images_f32.transpose(0, 3, 1, 2)))


def reconstruction_mse(model: Colorizer, images: np.ndarray, batch: int = 500) -> float:
    """Mean squared RGB error of ``model`` over uint8 ``images``."""
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = images[i:i + batch].astype(np.float32) / 255.0
            pred = model(_gray_tensor(x))
            total += float(F.mse_loss(pred, _rgb_tensor(x), reduction="sum"))
            count += x.size
    return total / count


def train_colorizer(images: np.ndarray, config: ColorizerConfig, dataset: str | None = None,
                    held_out: np.ndarray | None = None, log_every_epoch: bool = True) -> Colorizer:
    """Pretrain a colorizer on uint8 RGB ``images``.

    Per-epoch mean training loss goes to ``metadata["loss_history"]``; with
    ``held_out`` images the held-out MSE after each epoch goes to
    ``metadata["heldout_history"]``.
    """
    if len(images) == 0:
        raise DataError("cannot train a colorizer on an empty image set")
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DataError(f"colorizer training needs N x H x W x 3 images, got {images.shape}")
    if config.epochs < 1 or config.batch < 1:
        raise ConfigError("colorizer epochs and batch must be positive")

    model = build_colorizer(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(config.seed)
    history, heldout_history = [], []
    try:
        for epoch in range(config.epochs):
            model.train()
            order = rng.permutation(len(images))
            running, seen = 0.0, 0
            for i in range(0, len(order), config.batch):
                x = images[order[i:i + config.batch]].astype(np.float32) / 255.0
                pred = model(_gray_tensor(x))
                loss = colorizer_loss(pred, _rgb_tensor(x))
                if not torch.isfinite(loss):
                    raise NumericError(f"colorizer loss became {loss.item()} in epoch {epoch + 1}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(x)
                seen += len(x)
            history.append(running / seen)
            line = f"colorizer epoch {epoch + 1}/{config.epochs} loss {history[-1]:.6f}"
            if held_out is not None:
                heldout_history.append(reconstruction_mse(model, held_out))
                line += f" held-out {heldout_history[-1]:.6f}"
            if log_every_epoch:
                logger.info(line)
    finally:
        torch.random.set_rng_state(gen_state)

    model.eval()
    model.metadata = {
        "dataset": dataset,
        "epochs": config.epochs,
        "loss_history": history,
        "heldout_history": heldout_history,
        "seed": config.seed,
        "learning_rate": config.learning_rate,
        "batch": config.batch,
    }
    return model


def colorizer_filename(dataset: str, epochs: int) -> str:
    return f"{dataset}-{epochs}-color"


# Colorizer used by default for each target dataset.
DEFAULT_PAIRING = {
    "cifar10": ("cifar10", 300),
    "svhn": ("cifar10", 100),
    "cifar100": ("cifar100", 100),
}


def save_colorizer(params: Colorizer, path) -> Path:
    config = {"kind": KIND, "metadata": params.metadata}
    return container.save(path, config, dict(params.state_dict()))


def load_colorizer(path) -> Colorizer:
    config, tensors = container.load(path)
    if config.get("kind") != KIND:
        raise CheckpointError(f"{path}: not a colorizer checkpoint (kind={config.get('kind')!r})")
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    model = Colorizer().to(dtype)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match the colorizer layout: {exc}") from exc
    model.metadata = config.get("metadata", {})
    model.eval()
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise CheckpointError(f"{path}: non-finite colorizer parameters")
    return model
