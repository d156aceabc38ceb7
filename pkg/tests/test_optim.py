import numpy as np
import pytest
import torch

from maect.autodiff import Tensor
from maect.optim import SGD, AdamW, ParamSpec, lr_schedule, make_specs, scaled_lr


def test_scaled_lr():
    assert scaled_lr(1e-4, 256, 1) == 1e-4
    assert scaled_lr(1e-4, 1024, 2) == 8e-4
    with pytest.raises(ValueError):
        scaled_lr(1e-4, 256, 3)


def test_schedule_endpoints_and_midpoint():
    assert lr_schedule(0, 100, 0.1) == 0.0
    assert lr_schedule(10, 100, 0.1) == 1.0
    assert lr_schedule(100, 100, 0.1) == 0.0
    assert lr_schedule(60, 100, 0.2) == pytest.approx(0.5, abs=1e-15)
    assert lr_schedule(5, 100, 0.1) == 0.5
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 0.1)


def test_schedule_is_monotone_after_warmup():
    values = [lr_schedule(s, 50, 0.2) for s in range(51)]
    assert all(a <= b for a, b in zip(values[:10], values[1:11]))
    assert all(a >= b for a, b in zip(values[10:], values[11:]))


def test_decay_exclusions():
    params = {"w": Tensor(np.ones((2, 2))), "b.bias": Tensor(np.ones(2)), "norm.weight": Tensor(np.ones(2))}
    specs = make_specs(params, 0.05)
    assert specs["w"].weight_decay == 0.05
    assert specs["b.bias"].weight_decay == 0 and specs["norm.weight"].weight_decay == 0


def test_adamw_matches_torch():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 4))
    p = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW({"w": p}, {"w": ParamSpec(0.5, 0.1)}, betas=(0.9, 0.95))
    tp = torch.tensor(w0, requires_grad=True)
    topt = torch.optim.AdamW([tp], lr=0.5 * 0.01, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
    for _ in range(5):
        g = rng.normal(size=(3, 4))
        p.grad = g
        opt.step(0.01)
        tp.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(p.data, tp.detach().numpy(), rtol=0, atol=1e-14)


def test_zero_lr_scale_leaves_parameter_bit_identical():
    p = Tensor(np.arange(4.0), requires_grad=True)
    before = p.data.tobytes()
    opt = AdamW({"p": p}, {"p": ParamSpec(0.0, 0.1)})
    p.grad = np.ones(4)
    opt.step(1.0)
    assert p.data.tobytes() == before


def test_sgd_momentum_matches_torch():
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=5)
    p = Tensor(w0.copy(), requires_grad=True)
    opt = SGD({"p": p}, momentum=0.9)
    tp = torch.tensor(w0, requires_grad=True)
    topt = torch.optim.SGD([tp], lr=0.1, momentum=0.9)
    for _ in range(4):
        g = rng.normal(size=5)
        p.grad = g
        opt.step(0.1)
        tp.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(p.data, tp.detach().numpy(), rtol=0, atol=1e-14)
