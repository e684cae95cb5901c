import numpy as np
import pytest
import torch

from colors4l.colorizer import build_colorizer
from colors4l.data import LabeledSet


def structured_images(n, num_classes, seed, size=32):
    """Images with a class-specific color and stripe pattern plus noise, so a
    small network can fit their labels quickly."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    protos = rng.uniform(40, 215, (num_classes, 1, 1, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    freq = 1 + np.arange(num_classes) % 4
    stripes = np.stack([np.sin(2 * np.pi * f * (xx if c % 2 else yy) / size) for c, f in enumerate(freq)])
    images = protos[labels] + 30 * stripes[labels][..., None] + rng.normal(0, 12, (n, size, size, 3))
    return LabeledSet(np.clip(images, 0, 255).astype(np.uint8), labels.astype(np.int64))


def write_cifar10_bins(root, train_per_file, test_records, seed=0):
    """Fake CIFAR-10 binary batches in the official record layout."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    for name, n in [(nm, train_per_file) for nm in names] + [("test_batch.bin", test_records)]:
        rec = rng.integers(0, 256, (n, 3073), dtype=np.uint8)
        rec[:, 0] = np.arange(n) % 10
        rec.tofile(root / name)
    return root


@pytest.fixture
def tiny_colorizer():
    return build_colorizer(seed=0)


@pytest.fixture
def toy_train():
    return structured_images(256, 10, seed=0)


@pytest.fixture
def toy_test():
    return structured_images(100, 10, seed=1)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def toy_split(n_train=80, budget=32, seed=0, n_test=40):
    from colors4l.data import make_split

    train = structured_images(n_train, 10, seed=seed)
    test = structured_images(n_test, 10, seed=seed + 100)
    return make_split(train, budget, seed, test=test, num_classes=10)


def toy_config(**kw):
    from colors4l.trainer import TrainConfig

    base = dict(batch=16, epochs=40, width=1 / 16, lr=0.05, seed=0)
    base.update(kw)
    return TrainConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def record_verdict(number: int, ok: bool, detail: str) -> None:
    """Print and keep one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
