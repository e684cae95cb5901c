"""Backbones with a supervised and a self-supervised classification head,
plus the loss, gradient and optimizer primitives the trainer builds on."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, NumericError
from .pretext import NUM_PROXY_CLASSES

HEADS = ("super", "self")


def _ch(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


def _conv_bn(cin, cout, k, padding):
    return [nn.Conv2d(cin, cout, k, padding=padding), nn.BatchNorm2d(cout), nn.LeakyReLU(0.1)]


def convnet13(width: float = 1.0, in_channels: int = 3) -> tuple[nn.Sequential, int]:
    """The 13-layer max-pooling ConvNet of the consistency-regularization
    literature: 3x(3x3 conv 128) / pool / dropout, 3x(3x3 conv 256) / pool /
    dropout, 3x3 conv 512 (valid), 1x1 conv 256, 1x1 conv 128, global average
    pool. Each stage is one entry of the returned Sequential."""
    a, b, c, d, e = (_ch(n, width) for n in (128, 256, 512, 256, 128))
    stages = nn.Sequential(
        nn.Sequential(*_conv_bn(in_channels, a, 3, 1), *_conv_bn(a, a, 3, 1), *_conv_bn(a, a, 3, 1),
                      nn.MaxPool2d(2), nn.Dropout(0.5)),
        nn.Sequential(*_conv_bn(a, b, 3, 1), *_conv_bn(b, b, 3, 1), *_conv_bn(b, b, 3, 1),
                      nn.MaxPool2d(2), nn.Dropout(0.5)),
        nn.Sequential(*_conv_bn(b, c, 3, 0), *_conv_bn(c, d, 1, 0), *_conv_bn(d, e, 1, 0)),
        nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten()),
    )
    return stages, e


class WideBasic(nn.Module):
    """Pre-activation wide residual block."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(o)
        o = self.conv1(o)
        o = self.conv2(F.relu(self.bn2(o)))
        return o + skip


def wide_resnet(depth: int = 28, widen: int = 4, width: float = 1.0,
                in_channels: int = 3) -> tuple[nn.Sequential, int]:
    if (depth - 4) % 6:
        raise ConfigError(f"wide resnet depth must be 6n+4, got {depth}")
    n = (depth - 4) // 6
    widths = [_ch(16, width)] + [_ch(16 * 2 ** i * widen, width) for i in range(3)]
    stages = [nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)]
    cin = widths[0]
    for group, cout in enumerate(widths[1:]):
        for i in range(n):
            stride = 2 if group > 0 and i == 0 else 1
            stages.append(WideBasic(cin, cout, stride))
            cin = cout
    stages.append(nn.Sequential(nn.BatchNorm2d(cin), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten()))
    return nn.Sequential(*stages), cin


def probe_mlp(width: float = 1.0, in_channels: int = 1, image_size: int = 8,
              hidden: int = 16) -> tuple[nn.Sequential, int]:
    """Tiny two-layer network for gradient and contract checks."""
    h = _ch(hidden, width)
    stages = nn.Sequential(
        nn.Sequential(nn.Flatten(), nn.Linear(in_channels * image_size * image_size, h), nn.Tanh()),
    )
    return stages, h


BACKBONES = {
    "convnet13": convnet13,
    "wrn_28_4": wide_resnet,
    "probe": probe_mlp,
}


class DualHeadModel(nn.Module):
    def __init__(self, backbone: nn.Sequential, feature_dim: int, num_classes: int, arch: str):
        super().__init__()
        self.backbone = backbone
        self.head_super = nn.Linear(feature_dim, num_classes)
        self.head_self = nn.Linear(feature_dim, NUM_PROXY_CLASSES)
        self.arch = arch
        self.num_classes = num_classes

    def features(self, x: torch.Tensor, check: bool = True) -> torch.Tensor:
        for i, stage in enumerate(self.backbone):
            x = stage(x)
            if check and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after backbone stage {i} ({self.arch})")
        return x

    def forward(self, x: torch.Tensor, head: str = "super") -> torch.Tensor:
        h = self.features(x)
        return self.head_super(h) if head == "super" else self.head_self(h)


def _init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="leaky_relu", a=0.1)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(arch: str, num_classes: int, seed: int = 0, width: float = 1.0,
                dtype=torch.float32, **backbone_kwargs) -> DualHeadModel:
    if arch not in BACKBONES:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(BACKBONES)}")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        backbone, dim = BACKBONES[arch](width=width, **backbone_kwargs)
        model = DualHeadModel(backbone, dim, num_classes, arch)
        _init_weights(model)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def forward(model: DualHeadModel, batch: torch.Tensor, head: str) -> torch.Tensor:
    """Logits of ``head`` ("super" or "self") for a normalized NCHW batch."""
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}")
    logits = model(batch, head)
    if not torch.isfinite(logits).all():
        raise NumericError(f"non-finite logits from head {head!r}")
    return logits


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood using a max-shifted log-sum-exp."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    c = logits.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= c):
        raise ContractError(f"targets must lie in [0, {c}), got range "
                            f"[{int(targets.min())}, {int(targets.max())}]")
    shift = logits.max(dim=1, keepdim=True).values.detach()
    z = logits - shift
    lse = torch.log(torch.exp(z).sum(dim=1))
    picked = z.gather(1, targets[:, None]).squeeze(1)
    return (lse - picked).mean()


def softmax(logits: torch.Tensor) -> torch.Tensor:
    z = logits - logits.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def gradients(model: nn.Module, loss: torch.Tensor, retain_graph: bool = False) -> dict:
    """Gradient of ``loss`` for every named parameter; ``None`` where the
    parameter does not influence the loss."""
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain_graph)
    out = {}
    for name, g in zip(names, grads):
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        out[name] = g
    return out


@dataclass
class OptimState:
    """Momentum SGD with coupled weight decay and a cosine learning rate."""

    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_steps: int = 1
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        t = min(max(step, 0), self.total_steps)
        return 0.5 * self.lr0 * (1.0 + math.cos(math.pi * t / self.total_steps))

    @property
    def lr(self) -> float:
        return self.lr_at(self.step)


def sgd_step(model: nn.Module, grads: dict, optim: OptimState) -> nn.Module:
    """One in-place update. Parameters with a ``None`` gradient are left
    untouched (no decay, no momentum drift)."""
    lr = optim.lr
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = grads.get(name)
            if g is None:
                continue
            d = g + optim.weight_decay * p if optim.weight_decay else g.clone()
            if optim.momentum:
                buf = optim.buffers.get(name)
                if buf is None:
                    buf = d.detach().clone()
                else:
                    buf.mul_(optim.momentum).add_(d)
                optim.buffers[name] = buf
                d = buf
            p.sub_(lr * d)
    optim.step += 1
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
