"""Desk-scale experiments shared by the acceptance suite and scripts/."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import EncoderConfig, TrainPlan
from .data.dataset import SignalSet
from .data.synth import SignalSpec
from .data.teachers import FrozenTeacher, preset
from .encoder import StepModel
from .training import Trainer, evaluate, load_parameters, model_tensors


CHIRP_SNR = (1.5, 3.0)


def chirp_spec(length: int = 256, snr=CHIRP_SNR, seed: int = 0) -> SignalSpec:
    """Binary chirp-in-noise detection at a moderate amplitude SNR band."""
    return SignalSpec(name="chirp", length_min=length, length_max=length, snr_min=snr[0], snr_max=snr[1], seed=seed)


def chirp_splits(spec: SignalSpec, n_train: int, n_val: int) -> tuple[SignalSet, SignalSet]:
    return SignalSet.generate(spec, 0, n_train), SignalSet.generate(spec, n_train, n_val)


@dataclass
class RunReport:
    accuracy: float
    macro_f1: float
    seconds: float
    curve: list[tuple[int, float]] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def finetune(model: StepModel, train: SignalSet, val: SignalSet, plan: TrainPlan, eval_every: int = 0) -> RunReport:
    t0 = time.perf_counter()
    trainer = Trainer(plan, model, train, val)
    curve = []
    chunk = eval_every or plan.steps
    while trainer.step < plan.steps:
        trainer.run(min(chunk, plan.steps - trainer.step))
        if eval_every and trainer.step < plan.steps:
            curve.append((trainer.step, evaluate(model, val).accuracy))
    rep = evaluate(model, val)
    curve.append((trainer.step, rep.accuracy))
    return RunReport(rep.accuracy, rep.macro_f1, time.perf_counter() - t0, curve, trainer.result.log)


def desk_chirp(length=256, n_train=20000, n_val=4000, steps=3000, seed=0, eval_every=0, snr=CHIRP_SNR) -> RunReport:
    """Desk preset (D=64, 2 blocks), batch 32, default three-phase schedule."""
    t0 = time.perf_counter()
    train, val = chirp_splits(chirp_spec(length, snr), n_train, n_val)
    torch.manual_seed(seed)
    model = StepModel(EncoderConfig.desk())
    rep = finetune(model, train, val, TrainPlan(steps=steps, seed=seed), eval_every)
    rep.seconds = time.perf_counter() - t0
    return rep


@dataclass
class DistillComparison:
    seed: int
    distilled: float
    scratch: float
    first_loss: float
    final_loss: float

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.first_loss


def distill_then_finetune(
    seed: int,
    length: int = 256,
    n_pretrain: int = 4000,
    n_train: int = 20000,
    n_val: int = 1000,
    distill_steps: int = 600,
    finetune_steps: int = 1000,
    boundaries=(333, 667),
    distill_lr: float = 1e-3,
) -> DistillComparison:
    """Pretrain against the audio-like teacher on unlabeled chirp-domain data,
    fine-tune on the chirp task, and compare with from-scratch training from
    the same initialization at an equal fine-tuning budget."""
    spec = chirp_spec(length)
    # pretraining pool: same domain, disjoint indices, labels unused
    pre = SignalSet.generate(spec, 10_000_000, n_pretrain)
    train, val = chirp_splits(spec, n_train, n_val)
    teacher_spec = preset("audio-like")
    teacher = FrozenTeacher(teacher_spec)
    feats = {s.id: teacher(s.x).astype(np.float32) for s in pre.samples}

    torch.manual_seed(seed)
    init = StepModel(EncoderConfig.desk())
    start = {k: v.clone() for k, v in model_tensors(init).items()}

    plan = TrainPlan(mode="distill", steps=distill_steps, seed=seed, lr=distill_lr)
    dist = Trainer(plan, init, pre, teachers={teacher_spec.teacher_id: (teacher_spec, feats)})
    log = dist.run().log
    first = log[0]["loss"]
    final = float(np.mean([r["loss"] for r in log[-20:]]))

    ft_plan = TrainPlan(steps=finetune_steps, seed=seed, phase_boundaries=tuple(boundaries))
    distilled = finetune(dist.model, train, val, ft_plan).accuracy

    scratch_model = load_parameters(StepModel(EncoderConfig.desk()), start)
    scratch = finetune(scratch_model, train, val, ft_plan).accuracy
    return DistillComparison(seed, distilled, scratch, first, final)
