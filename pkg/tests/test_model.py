import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from colors4l.errors import ConfigError, ContractError, NumericError
from colors4l.model import (
    OptimState,
    build_model,
    count_parameters,
    cross_entropy,
    forward,
    gradients,
    sgd_step,
    softmax,
)

from gradcheck import max_relative_error, numeric_gradients


def wrn_param_count(depth, widen, num_classes, proxy_classes=7, in_ch=3):
    """Closed-form parameter count of a pre-activation WRN with two heads."""
    n = (depth - 4) // 6
    widths = [16, 16 * widen, 32 * widen, 64 * widen]
    total = 9 * in_ch * widths[0]
    cin = widths[0]
    for cout in widths[1:]:
        for i in range(n):
            total += 2 * cin + 9 * cin * cout + 2 * cout + 9 * cout * cout
            if cin != cout:
                total += cin * cout
            cin = cout
    total += 2 * cin
    return total + (cin + 1) * (num_classes + proxy_classes)


def test_convnet13_heads():
    model = build_model("convnet13", 10, seed=0, width=0.125).eval()
    x = torch.randn(2, 3, 32, 32)
    assert forward(model, x, "super").shape == (2, 10)
    assert forward(model, x, "self").shape == (2, 7)


def test_convnet13_full_width_layout():
    model = build_model("convnet13", 10)
    convs = [m for m in model.backbone.modules() if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [128] * 3 + [256] * 3 + [512, 256, 128]
    assert [c.kernel_size[0] for c in convs] == [3] * 7 + [1, 1]
    assert model.head_super.in_features == 128


def test_wrn_28_4_parameter_count():
    expected = wrn_param_count(28, 4, 100)
    model = build_model("wrn_28_4", 100)
    assert count_parameters(model) == expected
    assert abs(expected - 5.87e6) / 5.87e6 < 0.005
    assert count_parameters(build_model("wrn_28_4", 10)) == wrn_param_count(28, 4, 10)


def test_build_is_deterministic_per_seed():
    a = build_model("convnet13", 10, seed=3, width=0.25)
    b = build_model("convnet13", 10, seed=3, width=0.25)
    c = build_model("convnet13", 10, seed=4, width=0.25)
    for (n, p), q, r in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(p, q), n
    assert not all(torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_model("probe", 3, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_unknown_arch():
    with pytest.raises(ConfigError):
        build_model("resnet50", 10)


def test_batch_independence_in_inference_mode():
    model = build_model("convnet13", 10, seed=0, width=0.125).eval()
    x = torch.randn(32, 3, 32, 32)
    with torch.no_grad():
        one = forward(model, x[:1], "super")
        many = forward(model, x, "super")
    torch.testing.assert_close(one[0], many[0], atol=1e-5, rtol=1e-5)


def test_zero_heads_give_zero_logits():
    model = build_model("wrn_28_4", 10, width=0.25).eval()
    with torch.no_grad():
        for head in (model.head_super, model.head_self):
            head.weight.zero_()
            head.bias.zero_()
        x = torch.randn(3, 3, 32, 32)
        assert torch.equal(forward(model, x, "super"), torch.zeros(3, 10))
        assert torch.equal(forward(model, x, "self"), torch.zeros(3, 7))


def test_non_finite_activation_names_stage():
    model = build_model("probe", 3, seed=0, in_channels=1)
    x = torch.full((1, 1, 8, 8), float("nan"))
    with pytest.raises(NumericError, match="stage 0"):
        forward(model, x, "super")


def test_cross_entropy_reference_values():
    for c in (2, 7, 10, 100):
        assert float(cross_entropy(torch.zeros(4, c, dtype=torch.float64), torch.zeros(4, dtype=torch.long))) \
            == pytest.approx(math.log(c), abs=1e-12)
    stable = cross_entropy(torch.tensor([[1000.0, 0.0]]), torch.tensor([0]))
    assert torch.isfinite(stable) and float(stable) == pytest.approx(0.0, abs=1e-6)
    assert float(cross_entropy(torch.zeros(1, 2), torch.tensor([1]))) == pytest.approx(0.693147, abs=1e-6)
    with pytest.raises(ContractError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.data())
@settings(max_examples=100, deadline=None)
def test_cross_entropy_matches_naive_formula(row, data):
    target = data.draw(st.integers(0, len(row) - 1))
    logits = torch.tensor([row], dtype=torch.float64)
    naive = -math.log(math.exp(row[target]) / sum(math.exp(v) for v in row))
    got = float(cross_entropy(logits, torch.tensor([target])))
    assert got >= 0
    assert got == pytest.approx(naive, rel=1e-9, abs=1e-12)
    assert float(softmax(logits).sum()) == pytest.approx(1.0, abs=1e-12)


def test_softmax_rows_sum_to_one_f32():
    p = softmax(torch.randn(64, 10) * 20)
    assert torch.all(p >= 0)
    torch.testing.assert_close(p.sum(1), torch.ones(64), atol=1e-5, rtol=0)


def _probe(k=3, seed=0):
    return build_model("probe", k, seed=seed, dtype=torch.float64, in_channels=1, image_size=8)


def test_probe_gradients_match_finite_differences():
    model = _probe()
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(6, 1, 8, 8, dtype=torch.float64, generator=gen)
    y = torch.randint(0, 3, (6,), generator=gen)
    for head in ("super", "self"):
        targets = y if head == "super" else torch.randint(0, 7, (6,), generator=gen)

        def loss_fn():
            return cross_entropy(model(x, head), targets)

        analytic = gradients(model, loss_fn())
        assert max_relative_error(analytic, numeric_gradients(model, loss_fn)) < 1e-4


def test_head_gradients_are_disjoint():
    model = _probe()
    x = torch.randn(4, 1, 8, 8, dtype=torch.float64)
    g_super = gradients(model, cross_entropy(model(x, "super"), torch.tensor([0, 1, 2, 0])))
    g_self = gradients(model, cross_entropy(model(x, "self"), torch.tensor([0, 6, 3, 1])))
    assert g_super["head_self.weight"] is None and g_self["head_super.weight"] is None
    assert g_super["backbone.0.1.weight"] is not None and g_self["backbone.0.1.weight"] is not None


def test_zero_loss_gives_zero_gradients():
    model = _probe()
    x = torch.randn(3, 1, 8, 8, dtype=torch.float64)
    out = model(x, "super")
    loss = ((out - out.detach()) ** 2).mean()
    assert all(torch.count_nonzero(g) == 0 for g in gradients(model, loss).values() if g is not None)


def test_non_finite_gradient_raises():
    model = _probe()
    x = torch.randn(3, 1, 8, 8, dtype=torch.float64)
    loss = model(x, "super").sum() * float("inf")
    with pytest.raises(NumericError):
        gradients(model, loss)


class _One(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([w], dtype=torch.float64))


def test_sgd_single_parameter_definition():
    m = _One(1.0)
    opt = OptimState(lr0=0.1, momentum=0.9, weight_decay=0.0, total_steps=1000)
    sgd_step(m, {"w": torch.tensor([1.0], dtype=torch.float64)}, opt)
    assert m.w.item() == pytest.approx(0.9, abs=1e-15)
    assert opt.step == 1


def test_sgd_zero_grads_no_decay_is_noop_and_none_is_skipped():
    model = _probe()
    before = [p.clone() for p in model.parameters()]
    opt = OptimState(lr0=0.1, weight_decay=0.0, total_steps=10)
    sgd_step(model, {n: torch.zeros_like(p) for n, p in model.named_parameters()}, opt)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    opt = OptimState(lr0=0.1, weight_decay=5e-4, total_steps=10)
    sgd_step(model, {n: None for n, _ in model.named_parameters()}, opt)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_sgd_momentum_and_decay_recurrence():
    # Hand recurrence: d = g + wd*w; v = mu*v + d; w -= lr_t * v.
    m = _One(2.0)
    opt = OptimState(lr0=0.1, momentum=0.9, weight_decay=0.01, total_steps=4)
    w, v = 2.0, None
    for t, g in enumerate([0.5, -0.25, 1.0]):
        lr = 0.05 * (1 + math.cos(math.pi * t / 4))
        d = g + 0.01 * w
        v = d if v is None else 0.9 * v + d
        w -= lr * v
        sgd_step(m, {"w": torch.tensor([g], dtype=torch.float64)}, opt)
        assert m.w.item() == pytest.approx(w, abs=1e-14)


def test_cosine_schedule_endpoints():
    opt = OptimState(lr0=0.05, total_steps=11730)
    assert opt.lr_at(0) == 0.05
    assert opt.lr_at(11730) == pytest.approx(0.0, abs=1e-18)
    assert opt.lr_at(11729) < 0.05 * 1e-6
    assert opt.lr_at(11730 // 2) == pytest.approx(0.025, rel=1e-3)
