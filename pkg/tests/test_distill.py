import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from stepts.config import EncoderConfig
from stepts.data.teachers import PRESETS, TeacherSpec
from stepts.distill import (
    AlignmentError,
    ProjectionHeads,
    RoundRobinLoader,
    RoutingError,
    TeacherRegistry,
    combine_losses,
    distill_loss,
    flatten_channels,
    forced_stride,
    route_batch,
)
from stepts.encoder import StepModel
from stepts.numeric import ContractError
from stepts.patching import build_windows, estimate_length, n_windows


def test_forced_stride_inverts_length_estimate(f64):
    s = forced_stride(1000, 99)
    assert s == 10.0
    assert abs(estimate_length(1000, torch.tensor(s)).item() - 99) < 1e-9


def test_forced_stride_integer_case():
    s = forced_stride(300, 149)
    assert s == 2.0
    assert build_windows(300, torch.tensor(s)).n == (300 - 4) // 2 + 1 == 149


def test_forced_stride_rejects_too_long_teacher():
    with pytest.raises(AlignmentError):
        forced_stride(100, 100)
    with pytest.raises(AlignmentError):
        forced_stride(100, 99)
    with pytest.raises(ContractError):
        forced_stride(100, 0)


def test_realized_length_grid():
    rng = np.random.default_rng(7)
    seen = 0
    while seen < 500:
        t = int(rng.integers(16, 100001))
        n_t = int(rng.integers(5, 201))
        if t / (n_t + 1) <= 1:
            continue
        assert abs(n_windows(t, forced_stride(t, n_t)) - n_t) <= 1, (t, n_t)
        seen += 1


@pytest.mark.parametrize("t,n_t", [(64, 5), (257, 31), (1000, 99), (333, 165)])
def test_realized_length_through_model(t, n_t):
    torch.manual_seed(0)
    model = StepModel(EncoderConfig.tiny())
    out = model(torch.randn(1, t, 2), forced_stride=forced_stride(t, n_t))
    assert abs(out.patch_tokens.shape[1] - n_t) <= 1
    assert out.state.forced


def naive_mse(z, f):
    k = min(len(z), len(f))
    acc = 0.0
    for i in range(k):
        for j in range(z.shape[1]):
            acc += (float(z[i, j]) - float(f[i, j])) ** 2
    return acc / (k * z.shape[1])


def test_distill_loss_examples(f64, gen):
    f = torch.randn(10, 4, generator=gen)
    assert distill_loss(f, f).item() == 0.0
    assert distill_loss(f + 1, f).item() == pytest.approx(1.0, abs=1e-12)
    z = torch.randn(11, 4, generator=gen)
    assert abs(distill_loss(z, f).item() - naive_mse(z, f)) <= 1e-7
    assert abs(distill_loss(z[:9], f).item() - naive_mse(z[:9], f)) <= 1e-7


def test_distill_loss_misalignment():
    with pytest.raises(AlignmentError):
        distill_loss(torch.zeros(12, 3), torch.zeros(10, 3))
    with pytest.raises(ContractError):
        distill_loss(torch.zeros(10, 3), torch.zeros(10, 4))


def test_combine_examples():
    assert combine_losses({"a": 0.5}) == 0.5
    assert combine_losses({"a": 0.5, "b": 1.5, "c": 0.0}) == 2.0
    assert combine_losses({"a": 0.5, "b": 1.5}, {"b": 2.0}) == 3.5
    with pytest.raises(ContractError):
        combine_losses({})


@given(st.dictionaries(st.text("abcdef", min_size=1, max_size=3), st.floats(0, 10), min_size=2, max_size=6))
def test_combine_additive_and_order_free(losses):
    keys = sorted(losses)
    a = {k: losses[k] for k in keys[: len(keys) // 2]}
    b = {k: losses[k] for k in keys[len(keys) // 2 :]}
    whole = combine_losses(losses)
    assert abs(whole - (combine_losses(a) + combine_losses(b))) <= 1e-9 * max(1.0, whole)
    assert combine_losses(dict(reversed(list(losses.items())))) == whole


def test_projection_gradients_are_independent(f64, gen):
    specs = list(PRESETS.values())
    heads = ProjectionHeads(8, specs).double()
    z = {s.teacher_id: torch.randn(1, 12, 8, generator=gen) for s in specs}
    tgt = {s.teacher_id: torch.randn(1, 12, s.dim, generator=gen) for s in specs}

    def grads(active):
        heads.zero_grad(set_to_none=True)
        per = {tid: distill_loss(heads[tid](z[tid]), tgt[tid]) * (1.0 if tid in active else 0.0) for tid in z}
        combine_losses(per).backward()
        return {tid: heads[tid].weight.grad.clone() for tid in z}

    full = grads(set(z))
    for tid in z:
        solo = grads({tid})
        assert torch.equal(full[tid], solo[tid])


def test_routing():
    reg = TeacherRegistry(list(PRESETS.values()))
    assert reg.route("audio") == "audio-like"
    assert route_batch(["neural", "neural"], reg) == ["neural-like"] * 2
    with pytest.raises(RoutingError):
        route_batch(["audio", "neural"], reg)
    with pytest.raises(RoutingError):
        reg.route("seismic")
    with pytest.raises(ContractError):
        TeacherRegistry([PRESETS["audio-like"], TeacherSpec("dup", "audio", 4, 4)])


def test_round_robin_balance():
    loader = RoundRobinLoader({"audio": range(40), "general-ts": range(40, 90), "neural": range(90, 100)}, 4, seed=3)
    counts = {}
    for step in range(300):
        d, idx = loader.batch(step)
        counts[d] = counts.get(d, 0) + 1
        pool = {"audio": range(40), "general-ts": range(40, 90), "neural": range(90, 100)}[d]
        assert all(i in pool for i in idx)
    assert counts == {"audio": 100, "general-ts": 100, "neural": 100}
    d, idx = loader.batch(17)
    d2, idx2 = RoundRobinLoader({"audio": range(40), "general-ts": range(40, 90), "neural": range(90, 100)}, 4, 3).batch(17)
    assert d == d2 and np.array_equal(idx, idx2)


def test_flatten_channels():
    x = np.array([[1, 2], [3, 4]])
    assert flatten_channels(x)[:, 0].tolist() == [1, 2, 3, 4]
    y = np.arange(7.0)[:, None]
    assert np.array_equal(flatten_channels(y), y)
    z = np.random.default_rng(0).normal(size=(9, 5))
    assert np.array_equal(flatten_channels(z).reshape(9, 5), z)


def test_linear_teacher_distillation_converges():
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    t, n_t, d_t = 128, 16, 6
    w_t = torch.randn(1, d_t, generator=g)
    xs = torch.randn(64, t, 1, generator=g)
    targets = F.adaptive_avg_pool1d((xs @ w_t).transpose(1, 2), n_t).transpose(1, 2)
    model = StepModel(EncoderConfig.tiny(d_model=16, n_heads=2, head_hidden=(16, 16)))
    proj = ProjectionHeads(16, [TeacherSpec("lin", "audio", d_t, t // n_t)])
    params = [p for n, p in model.named_parameters() if not n.startswith(("patching.stride_learner.", "head."))]
    opt = torch.optim.Adam(params + list(proj.parameters()), lr=3e-3)
    s = forced_stride(t, n_t)
    losses = []
    for step in range(500):
        idx = torch.arange(step * 8, step * 8 + 8) % 64
        out = model(xs[idx], forced_stride=s)
        loss = distill_loss(proj["lin"](out.patch_tokens), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert np.mean(losses[-10:]) <= 0.1 * np.mean(losses[:1])
