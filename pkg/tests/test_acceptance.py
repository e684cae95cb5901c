"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s``; the lines are also collected
in the terminal summary. Criteria 6 and 7 need the real CIFAR-10 data under
``$COLORS4L_DATA`` (default ``./data``) and fail when it is absent.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from colors4l.colorizer import ColorizerConfig, colorizer_forward, load_colorizer, train_colorizer
from colors4l.data import default_data_root, load_dataset, make_split, to_float
from colors4l.errors import ColorS4LError
from colors4l.experiment import find_default_colorizer
from colors4l.model import build_model, cross_entropy, gradients
from colors4l.pretext import grayscale_batch, hflip, rotate90, sample_proxy_batch, vflip
from colors4l.report import ResultTable, read_csv, write_csv
from colors4l.trainer import TrainConfig, aggregate_runs, composite_loss, evaluate, train_loop

from conftest import record_verdict, structured_images, toy_config, toy_split
from gradcheck import max_relative_error, numeric_gradients
from test_trainer import _probe, _probe_batches

pytestmark = pytest.mark.acceptance


def _verdict(number, ok, detail):
    record_verdict(number, bool(ok), detail)
    assert ok, detail


def test_criterion_01_transform_exactness():
    images = np.random.default_rng(0).integers(0, 256, (1000, 32, 32, 3), dtype=np.uint8)
    start = time.perf_counter()
    ok = True
    for img in images:
        x = img
        for _ in range(4):
            x = rotate90(x, 1)
        ok &= np.array_equal(x, img)
        ok &= np.array_equal(hflip(hflip(img)), img)
        ok &= np.array_equal(vflip(vflip(img)), img)
        ok &= np.array_equal(rotate90(img, 2), hflip(vflip(img)))
    elapsed = time.perf_counter() - start
    _verdict(1, ok and elapsed < 1.0, f"group laws bit-exact={ok} on 1000 images in {elapsed:.3f}s (< 1 s)")


def test_criterion_02_loss_math():
    worst_ce = max(abs(float(cross_entropy(torch.zeros(8, c), torch.arange(8) % c)) - math.log(c))
                   for c in (2, 7, 10, 100))
    cfg = toy_config(epochs=20)
    res = train_loop(toy_split(), cfg, _colorizer())
    worst_id = max(abs(r.total - (r.l_super + cfg.omega * r.l_self)) for r in res.trace)
    ok = worst_ce <= 1e-6 and worst_id <= 1e-6 and len(res.trace) == 100
    _verdict(2, ok, f"max |CE(uniform) - ln C| = {worst_ce:.2e}; max identity gap over "
                    f"{len(res.trace)} steps = {worst_id:.2e} (tol 1e-6)")


def test_criterion_03_gradient_correctness():
    model = _probe()
    pair, proxy = _probe_batches()
    omega = 1.0

    def loss_fn():
        return composite_loss(model, pair, proxy, omega)[2]

    fd_err = max_relative_error(gradients(model, loss_fn()), numeric_gradients(model, loss_fn))

    g_total = gradients(model, loss_fn())
    g_super = gradients(model, cross_entropy(model(pair.labeled_images, "super"), pair.labels))
    g_self = gradients(model, cross_entropy(model(proxy.images, "self"), proxy.labels))
    split_err = 0.0
    for name, g in g_total.items():
        a = g_super[name] if g_super[name] is not None else torch.zeros_like(g)
        b = g_self[name] if g_self[name] is not None else torch.zeros_like(g)
        expected = a + omega * b
        rel = (g - expected).abs() / torch.clamp(expected.abs(), min=1e-12)
        split_err = max(split_err, float(rel.max()))
    ok = fd_err < 1e-4 and split_err <= 1e-6
    _verdict(3, ok, f"FD max rel error {fd_err:.2e} (< 1e-4); branch-sum rel error {split_err:.2e} (<= 1e-6)")


def test_criterion_04_omega_zero_reduction():
    split = toy_split()
    colorizer = _colorizer()
    init = build_model("convnet13", 10, seed=0, width=1 / 16)
    zero = train_loop(split, toy_config(epochs=20, omega=0.0), colorizer)
    sup = train_loop(split, toy_config(epochs=20, omega=0.0, supervised_only=True))
    same_trace = [r.total for r in zero.trace] == [r.total for r in sup.trace]
    untouched = all(torch.equal(p, q) for p, q in zip(zero.model.head_self.parameters(),
                                                      init.head_self.parameters()))
    ok = same_trace and untouched and len(zero.trace) == 100
    _verdict(4, ok, f"trace equal to supervised-only run: {same_trace}; head_self bitwise unchanged "
                    f"after {len(zero.trace)} steps: {untouched}")


def test_criterion_05_determinism_and_resume(tmp_path):
    split = toy_split()
    colorizer = _colorizer()
    cfg = toy_config(epochs=40)
    a = train_loop(split, cfg, colorizer)
    b = train_loop(split, cfg, colorizer)
    same = [r.total for r in a.trace] == [r.total for r in b.trace]
    part = train_loop(split, cfg, colorizer, stop_at=100, checkpoint_dir=tmp_path)
    rest = train_loop(split, cfg, colorizer, resume=part.checkpoints[-1])
    resumed = [r.total for r in part.trace + rest.trace] == [r.total for r in a.trace]
    ok = same and resumed and len(a.trace) == 200
    _verdict(5, ok, f"two {len(a.trace)}-step runs identical: {same}; resume at step 100 reproduces trace: {resumed}")


def test_criterion_06_colorizer_learning():
    root = default_data_root()
    try:
        train, test = load_dataset("cifar10", root)
    except ColorS4LError as exc:
        _verdict(6, False, f"CIFAR-10 not available under {root} ({exc})")
    start = time.perf_counter()
    model = train_colorizer(train.images[:5000], ColorizerConfig(epochs=5, batch=64, seed=0),
                            dataset="cifar10", held_out=test.images[:1000], log_every_epoch=False)
    elapsed = time.perf_counter() - start
    hist = model.metadata["heldout_history"]
    reduction = 1 - hist[-1] / hist[0]
    out = colorizer_forward(model, grayscale_batch(to_float(test.images[:256])))
    bounded = out.shape == (256, 32, 32, 3) and out.min() > 0 and out.max() < 1
    ok = reduction >= 0.30 and bounded and elapsed <= 600
    _verdict(6, ok, f"held-out MSE {hist[0]:.5f} -> {hist[-1]:.5f} ({100 * reduction:.1f}% reduction, need >= 30%); "
                    f"outputs in (0,1) with shape Bx32x32x3: {bounded}; {elapsed:.0f}s (<= 600 s)")


def test_criterion_07_desk_scale_ssl_benefit():
    root = default_data_root()
    try:
        train, test = load_dataset("cifar10", root)
    except ColorS4LError as exc:
        _verdict(7, False, f"CIFAR-10 not available under {root} ({exc})")
    path = os.environ.get("COLORS4L_COLORIZER") or find_default_colorizer("cifar10", root, Path(root) / "cifar10")
    if path is None:
        _verdict(7, False, f"no pretrained colorizer cifar10-300-color under {root}; set COLORS4L_COLORIZER")
    colorizer = load_colorizer(path)
    errors = {1.0: [], 0.0: []}
    for seed in (0, 1, 2):
        split = make_split(train, 1000, seed, test=test, num_classes=10)
        for omega in errors:
            cfg = TrainConfig(omega=omega, batch=128, epochs=10, arch="convnet13", dataset="cifar10",
                              budget=1000, seed=seed)
            res = train_loop(split, cfg, colorizer)
            errors[omega].append(evaluate(res.model, test, res.norm_mean, res.norm_std))
    ssl, base = aggregate_runs(errors[1.0]), aggregate_runs(errors[0.0])
    gap = 100 * (base.mean - ssl.mean)
    _verdict(7, gap >= 2.0, f"Color-S4L {ssl.cell} vs supervised {base.cell}: gap {gap:.2f} pp (need >= 2)")


def test_criterion_08_proxy_uniformity():
    images = np.zeros((7000, 8, 8, 3), np.uint8)
    batch = sample_proxy_batch(images, np.random.default_rng(0), _colorizer())
    counts = np.bincount(batch.labels, minlength=7)
    p = chisquare(counts).pvalue
    _verdict(8, p > 0.01, f"counts {counts.tolist()} chi-square p = {p:.3f} (> 0.01)")


def test_criterion_09_overfit_sanity():
    train = structured_images(256, 10, seed=0)
    split = make_split(train, 256, 0, test=train, num_classes=10)
    cfg = TrainConfig(batch=32, epochs=25, width=0.125, augment=False, seed=0)
    res = train_loop(split, cfg, _colorizer())
    acc = 1 - evaluate(res.model, split.labeled, res.norm_mean, res.norm_std)
    steps = len(res.trace)
    _verdict(9, acc >= 0.99 and steps <= 200, f"train accuracy {100 * acc:.2f}% on 256 examples after {steps} steps "
                                              f"(need >= 99% within 200)")


def test_criterion_10_report_fidelity(tmp_path):
    cell = aggregate_runs([0.10, 0.30]).cell
    table = ResultTable("cifar10", [1000, 4000], {("Color-S4L", "convnet13"): {1000: cell, 4000: "12.34±0.56"},
                                                  ("Supervised", "convnet13"): {1000: "46.43±1.21"}})
    back = read_csv(write_csv(table, tmp_path / "t.csv"), "cifar10")
    ok = cell == "20.00±10.00" and back.rows == table.rows and back.budgets == table.budgets
    _verdict(10, ok, f"[0.10, 0.30] renders {cell!r}; CSV round trip exact: {back.rows == table.rows}")


def _colorizer():
    from colors4l.colorizer import build_colorizer

    return build_colorizer(0)
