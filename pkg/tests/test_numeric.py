import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from stepts.numeric import (
    CheckpointError,
    ContractError,
    NumericError,
    finite_diff_gradient,
    forward_backward,
    huber,
    load_checkpoint,
    nan_guard,
    rel_err,
    save_checkpoint,
)


def test_square_gradient(f64):
    x = torch.tensor(3.0, requires_grad=True)
    g = forward_backward(x * x, {"x": x})
    assert g["x"].item() == 6.0


def test_softmax_sum_has_zero_gradient(f64, gen):
    x = torch.randn(7, generator=gen, requires_grad=True)
    g = forward_backward(torch.softmax(x, 0).sum(), [x])[0]
    assert torch.allclose(g, torch.zeros(7), atol=1e-15)


def test_matmul_mse_matches_finite_differences(f64, gen):
    w = torch.randn(4, 4, generator=gen)
    v = torch.randn(4, generator=gen)
    t = torch.randn(4, generator=gen)

    def f(w_):
        return ((w_ @ v - t) ** 2).mean()

    wl = w.clone().requires_grad_(True)
    g = forward_backward(f(wl), [wl])[0]
    fd = finite_diff_gradient(f, w, 1e-5)
    assert rel_err(g, fd) <= 1e-6


def test_finite_diff_cube(f64):
    g = finite_diff_gradient(lambda x: (x**3).sum(), torch.tensor([2.0]), 1e-5)
    assert abs(g.item() - 12.0) <= 1e-6


def test_finite_diff_constant(f64):
    g = finite_diff_gradient(lambda x: torch.tensor(4.2), torch.randn(5), 1e-5)
    assert torch.equal(g, torch.zeros(5))


def test_non_scalar_loss_rejected(f64):
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        forward_backward(x * 2, [x])


def test_nan_loss_rejected(f64):
    x = torch.tensor(-1.0, requires_grad=True)
    with pytest.raises(NumericError):
        forward_backward(torch.log(x), [x])


def test_nan_guard_names_node(f64):
    class Bad(nn.Module):
        def forward(self, x):
            return torch.log(x)

    model = nn.Sequential(nn.Identity(), Bad())
    with nan_guard(model), pytest.raises(NumericError, match="'1'"):
        model(torch.tensor([-1.0]))


def test_forward_backward_bit_deterministic(f64, gen):
    w = torch.randn(5, 5, generator=gen, requires_grad=True)
    x = torch.randn(5, generator=gen)

    def run():
        return forward_backward(torch.tanh(w @ x).exp().sum(), [w])[0]

    assert torch.equal(run(), run())


@pytest.mark.parametrize("x,expected", [(0.0, 0.0), (1.0, 0.5), (3.0, 2.5), (-3.0, 2.5)])
def test_huber_values(x, expected):
    assert huber(x, 1.0) == expected
    assert huber(torch.tensor(x, dtype=torch.float64)).item() == expected


def test_huber_rejects_bad_delta():
    with pytest.raises(ContractError):
        huber(1.0, 0.0)


@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(0.01, 10.0))
def test_huber_properties(x, delta):
    h = huber(x, delta)
    assert h == huber(-x, delta)
    assert h >= 0
    if abs(x) > 1e-150:
        assert h > 0
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(huber(xt, delta), xt)
    assert abs(g.item()) <= delta + 1e-12


def test_huber_continuous_derivative_at_delta(f64):
    for delta in (0.5, 1.0, 2.0):
        g = finite_diff_gradient(lambda x: huber(x, delta).sum(), torch.tensor([delta]), 1e-6)
        assert abs(g.item() - delta) < 1e-5


def test_checkpoint_roundtrip_f32(tmp_path):
    tensors = {"a.weight": torch.randn(3, 4), "b": torch.randn(()), "c.bias": torch.arange(5.0)}
    save_checkpoint(tmp_path / "c.bin", tensors)
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == torch.float32
        assert torch.equal(back[k], tensors[k])


def test_checkpoint_roundtrip_f64_exact(tmp_path):
    t = {"w": torch.randn(6, 2, dtype=torch.float64)}
    save_checkpoint(tmp_path / "c.bin", t)
    assert torch.equal(load_checkpoint(tmp_path / "c.bin")["w"], t["w"])


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "c.bin", {"ab": torch.tensor([[1.0, 2.0]])})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"STEPCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 2
    assert raw[16:18] == b"ab"
    assert int.from_bytes(raw[18:22], "little") == 2
    assert [int.from_bytes(raw[22 + 8 * i : 30 + 8 * i], "little") for i in range(2)] == [1, 2]
    assert np.frombuffer(raw[38:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_rejects_corruption(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": torch.randn(10)})
    raw = p.read_bytes()
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_rel_err_zero_for_zero_vectors():
    assert rel_err(torch.zeros(3), torch.zeros(3)) == 0.0
    assert math.isclose(rel_err(torch.tensor([1.0]), torch.tensor([2.0])), 0.5)
