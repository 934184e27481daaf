import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from stepts.config import EncoderConfig, TrainPlan
from stepts.data.dataset import SignalSet
from stepts.data.synth import SignalSpec
from stepts.encoder import StepModel
from stepts.numeric import CheckpointError, ContractError, load_checkpoint, save_checkpoint
from stepts.training import (
    Trainer,
    class_weights,
    evaluate,
    load_parameters,
    metrics_from_predictions,
    model_tensors,
    phase_of,
    weighted_ce,
)

TOY = SignalSpec(length_min=96, length_max=96, snr_min=3.0, snr_max=4.0)


def toy_data(n=64, start=0):
    return SignalSet.generate(TOY, start, n)


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return StepModel(EncoderConfig.tiny(**kw))


@pytest.mark.parametrize("step,groups", [
    (0, {"patching"}), (500, {"patching"}), (999, {"patching"}), (1000, {"patching", "head"}),
    (1500, {"patching", "head"}), (1999, {"patching", "head"}), (2000, {"patching", "head", "encoder"}),
    (2500, {"patching", "head", "encoder"}),
])
def test_phase_of(step, groups):
    assert phase_of(step) == groups


def test_plan_validation():
    with pytest.raises(ContractError):
        TrainPlan(phase_boundaries=(2000, 1000))
    with pytest.raises(ContractError):
        TrainPlan(lr=0.0)
    assert TrainPlan().batch_size == 32


def test_weighted_ce_examples(f64):
    assert weighted_ce(torch.zeros(4), torch.tensor([2])).item() == pytest.approx(math.log(4), abs=1e-12)
    logits = torch.randn(8, 3)
    labels = torch.randint(0, 3, (8,))
    w = torch.as_tensor(class_weights([10, 10, 10]))
    assert torch.equal(weighted_ce(logits, labels, w), weighted_ce(logits, labels))
    assert abs(weighted_ce(logits, labels).item() - F.cross_entropy(logits, labels).item()) <= 1e-12
    with pytest.raises(ContractError):
        weighted_ce(logits, torch.tensor([3] * 8))


def test_class_weight_example():
    assert np.allclose(class_weights([90, 10]), [0.2, 1.8], atol=1e-12)
    assert np.allclose(class_weights([0, 4]), [1.6, 0.4])


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=12))
def test_class_weight_mean_is_one(counts):
    assert abs(class_weights(counts).mean() - 1) <= 1e-9


def test_metric_examples():
    r = metrics_from_predictions([0, 0, 1, 1], [0, 1, 0, 1], 2)
    assert r.accuracy == 50 and r.f1 == [50, 50] and r.macro_f1 == 50
    r = metrics_from_predictions([0, 0, 1, 1], [1, 1, 1, 1], 2)
    assert r.accuracy == 50
    assert r.macro_f1 == pytest.approx((200 / 3) / 2)
    r = metrics_from_predictions([0, 1, 2], [0, 1, 2], 4)
    assert r.accuracy == 100 and r.f1[3] == 0
    assert "accuracy" in r.to_table() and '"confusion"' in r.to_json()


def test_metric_properties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 50))
        y = rng.integers(0, k, n)
        p = rng.integers(0, k, n)
        r = metrics_from_predictions(y, p, k)
        assert 0 <= r.accuracy <= 100 and 0 <= r.macro_f1 <= 100
        assert r.support == np.bincount(y, minlength=k).tolist()
        assert np.sum(r.confusion) == n
        assert np.array(r.confusion).sum(axis=0).tolist() == np.bincount(p, minlength=k).tolist()
        assert r.accuracy == pytest.approx(100 * np.mean(y == p))


def test_untrained_eval_near_chance():
    model = tiny_model()
    data = SignalSet.generate(SignalSpec(length_min=64, length_max=64), 0, 400)
    rep = evaluate(model, data)
    assert sum(rep.support) == 400


def test_penalty_free_loss_matches_ce(f64):
    model = tiny_model()
    tr = Trainer(TrainPlan(precision="test", batch_size=8), model, toy_data(16))
    loss, stats = tr.finetune_loss(np.arange(8))
    assert stats["stride_penalty"] == 0 and stats["length_penalty"] == 0
    assert abs(loss.item() - stats["ce"]) <= 1e-12


def test_zero_lambda_removes_penalty_gradient(f64):
    # push the stride past S_max so the penalty is active
    def run(weight, strip):
        model = tiny_model()
        with torch.no_grad():
            model.patching.stride_learner.fc2.bias.fill_(math.log(1000.0))
        data = SignalSet.generate(SignalSpec(length_min=3000, length_max=3000), 0, 4)
        tr = Trainer(TrainPlan(precision="test", batch_size=4, penalty_weight=weight), model, data)
        if strip:
            orig = tr.finetune_loss

            def ce_only(idx):
                _, stats = orig(idx)
                m = tr.model(torch.from_numpy(np.stack([data.samples[i].x for i in idx])).double())
                return weighted_ce(m.logits, torch.from_numpy(data.labels[idx]), tr.weights), stats

            tr.finetune_loss = ce_only
        before = {k: v.clone() for k, v in model_tensors(model).items()}
        rec = tr.train_step()
        assert rec["stride_penalty"] > 0
        return {k: model_tensors(model)[k] - before[k] for k in before}

    a, b = run(0.0, False), run(0.0, True)
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = run(0.1, False)
    assert not torch.equal(a["patching.stride_learner.fc2.bias"], c["patching.stride_learner.fc2.bias"])


def test_loss_decreases_on_toy_task():
    model = tiny_model(1, d_model=16, n_heads=2, head_hidden=(16, 16))
    plan = TrainPlan(steps=100, batch_size=16, lr=3e-3, phase_boundaries=(0, 1))
    tr = Trainer(plan, model, toy_data(256))
    losses = [r["loss"] for r in tr.run().log]
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_identical_runs_identical_metrics():
    def run():
        tr = Trainer(TrainPlan(steps=6, batch_size=8, eval_every=3), tiny_model(3), toy_data(32), toy_data(16, 32))
        res = tr.run()
        return res.metrics, [r["loss"] for r in res.log]

    assert run() == run()


def test_resume_is_bit_identical(tmp_path, f64):
    plan = TrainPlan(steps=20, batch_size=8, precision="test", lr=1e-3, phase_boundaries=(4, 8))
    data = toy_data(40)
    full = Trainer(plan, tiny_model(4), data)
    full.run(steps=5)
    full.save(tmp_path / "ck.bin")
    ref = [r["loss"] for r in full.run(steps=10).log[5:]]

    resumed = Trainer(plan, tiny_model(99), data)
    resumed.load(tmp_path / "ck.bin")
    assert resumed.step == 5
    got = [r["loss"] for r in resumed.run(steps=10).log]
    assert got == ref
    end_a, end_b = model_tensors(full.model), model_tensors(resumed.model)
    assert all(torch.equal(end_a[k], end_b[k]) for k in end_a)


def test_freeze_contract():
    plan = TrainPlan(steps=9, batch_size=4, lr=1e-2, phase_boundaries=(3, 6))
    model = tiny_model(5)
    tr = Trainer(plan, model, toy_data(24))
    group = model.group_of()
    snaps = [model_tensors(model)]
    snaps[0] = {k: v.clone() for k, v in snaps[0].items()}
    for _ in range(9):
        tr.train_step()
        snaps.append({k: v.clone() for k, v in model_tensors(model).items()})
    for step in range(9):
        groups = phase_of(step, plan.phase_boundaries)
        for name in snaps[0]:
            same = torch.equal(snaps[step][name], snaps[step + 1][name])
            if group[name] not in groups:
                assert same, (step, name)
    assert not torch.equal(snaps[0]["patching.stride_learner.fc2.bias"], snaps[3]["patching.stride_learner.fc2.bias"])
    assert not torch.equal(snaps[3]["head.fc3.weight"], snaps[6]["head.fc3.weight"])


def test_zero_gradient_adam_step_keeps_parameters():
    p = torch.nn.Parameter(torch.randn(5))
    before = p.detach().clone()
    opt = torch.optim.Adam([p], lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        (0.0 * p).sum().backward()
        opt.step()
    assert torch.equal(p.detach(), before)


def test_nan_loss_aborts():
    from stepts.numeric import NumericError

    model = tiny_model()
    with torch.no_grad():
        model.head.fc3.bias.fill_(float("nan"))
    tr = Trainer(TrainPlan(batch_size=4), model, toy_data(8))
    with pytest.raises(NumericError):
        tr.train_step()


def test_checkpoint_incompatibility(tmp_path):
    model = tiny_model()
    save_checkpoint(tmp_path / "a.bin", model_tensors(model))
    other = StepModel(EncoderConfig.tiny(n_classes=3))
    with pytest.raises(CheckpointError, match="shape"):
        load_parameters(other, load_checkpoint(tmp_path / "a.bin"))
    blob = model_tensors(model)
    del blob["head.fc3.bias"]
    with pytest.raises(CheckpointError, match="lacks"):
        load_parameters(tiny_model(), blob)


def test_distill_mode_freezes_stride_and_head():
    from stepts.data.teachers import FrozenTeacher, preset

    data = SignalSet.generate(SignalSpec(length_min=256, length_max=256), 0, 8)
    spec = preset("audio-like")
    teacher = FrozenTeacher(spec)
    feats = {s.id: teacher(s.x) for s in data.samples}
    model = tiny_model(d_model=8)
    tr = Trainer(TrainPlan(mode="distill", batch_size=4, lr=1e-2), model, data, teachers={spec.teacher_id: (spec, feats)})
    before = {k: v.clone() for k, v in model_tensors(model).items()}
    proj_before = tr.projections["audio-like"].weight.detach().clone()
    rec = tr.train_step()
    after = model_tensors(model)
    assert rec["teacher"] == "audio-like" and rec["n"] == 16
    for k in before:
        moved = not torch.equal(before[k], after[k])
        if k.startswith(("patching.stride_learner.", "head.")):
            assert not moved, k
    assert not torch.equal(before["encoder.positional.table"], after["encoder.positional.table"])
    assert not torch.equal(before["patching.conv.weight"], after["patching.conv.weight"])
    assert not torch.equal(proj_before, tr.projections["audio-like"].weight)
