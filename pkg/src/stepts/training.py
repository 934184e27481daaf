"""Fine-tuning and distillation loops, the freeze schedule, and metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainPlan
from .data.dataset import SignalSet
from .distill import ProjectionHeads, RoundRobinLoader, TeacherRegistry, combine_losses, distill_loss, epoch_batch, forced_stride
from .encoder import StepModel
from .numeric import CheckpointError, ContractError, NumericError, dtype_for, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ALL_GROUPS = frozenset({"patching", "encoder", "head"})


def _num(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def phase_of(step: int, boundaries: tuple[int, int] = (1000, 2000)) -> frozenset[str]:
    if step < 0:
        raise ContractError("step must be non-negative")
    if step < boundaries[0]:
        return frozenset({"patching"})
    if step < boundaries[1]:
        return frozenset({"patching", "head"})
    return ALL_GROUPS


def phase_index(step: int, boundaries: tuple[int, int] = (1000, 2000)) -> int:
    return 0 if step < boundaries[0] else 1 if step < boundaries[1] else 2


def class_weights(counts) -> np.ndarray:
    """w_c proportional to 1 / max(1, n_c), normalized to mean 1."""
    n = np.maximum(1.0, np.asarray(counts, dtype=np.float64))
    # w_c = K / sum_j (n_c / n_j): exactly 1 for uniform counts
    return len(n) / (n[:, None] / n[None, :]).sum(axis=1)


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of -w[y] log softmax(logits)[y]; 1-D logits are one sample."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels).reshape(-1).long()
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"label out of range for {k} classes")
    nll = -F.log_softmax(logits, dim=-1).gather(1, labels[:, None])[:, 0]
    if weights is not None:
        nll = nll * torch.as_tensor(weights, dtype=logits.dtype)[labels]
    return nll.mean()


# -- metrics -------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]  # rows = true class, cols = predicted

    @property
    def support(self) -> list[int]:
        return [sum(r) for r in self.confusion]

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "support": self.support}, indent=2)

    def to_table(self) -> str:
        rows = ["class,precision,recall,f1,support"]
        for c, (p, r, f, s) in enumerate(zip(self.precision, self.recall, self.f1, self.support)):
            rows.append(f"{c},{p:.4f},{r:.4f},{f:.4f},{s}")
        rows.append(f"all,,,{self.macro_f1:.4f},{sum(self.support)}")
        rows.append(f"accuracy,,,{self.accuracy:.4f},")
        return "\n".join(rows) + "\n"


def metrics_from_predictions(labels, preds, n_classes: int) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros(n_classes), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros(n_classes), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    acc = 100.0 * tp.sum() / max(1, len(labels))
    return MetricsReport(
        accuracy=float(acc),
        macro_f1=float(100.0 * f1.mean()),
        precision=[float(v) for v in 100 * precision],
        recall=[float(v) for v in 100 * recall],
        f1=[float(v) for v in 100 * f1],
        confusion=cm.tolist(),
    )


@torch.no_grad()
def predict(model: StepModel, data: SignalSet, batch_size: int = 256, indices=None) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    indices = np.arange(len(data)) if indices is None else np.asarray(indices)
    preds = np.zeros(len(data), dtype=np.int64)
    for start in range(0, len(indices), batch_size):
        for idx, xs, _ in data.groups(indices[start : start + batch_size]):
            out = model(torch.from_numpy(xs).to(dtype))
            preds[idx] = out.logits.argmax(-1).numpy()
    return preds[indices]


def evaluate(model: StepModel, data: SignalSet, batch_size: int = 256) -> MetricsReport:
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty split")
    return metrics_from_predictions(data.labels, predict(model, data, batch_size), model.cfg.n_classes)


# -- trainer -------------------------------------------------------------------


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    step: int = 0


class Trainer:
    """Single-writer optimization loop over one model.

    ``finetune`` mode minimizes weighted CE + penalty_weight * penalties under
    the three-phase freeze schedule. ``distill`` mode forces the stride to each
    teacher's length, trains everything but the stride learner and the head,
    and regresses projected tokens onto stored teacher features.
    """

    def __init__(
        self,
        plan: TrainPlan,
        model: StepModel,
        data: SignalSet,
        val: SignalSet | None = None,
        teachers: dict | None = None,
        out_dir: str | Path | None = None,
    ):
        self.plan = plan
        self.dtype = dtype_for(plan.precision)
        self.model = model.to(self.dtype)
        self.data = data
        self.val = val
        self.out_dir = Path(out_dir) if out_dir else None
        self.step = 0
        self.result = TrainResult()
        self.projections = None
        if plan.mode == "distill":
            if not teachers:
                raise ContractError("distill mode needs teacher specs and features")
            self.teacher_specs = {tid: spec for tid, (spec, _) in teachers.items()}
            self.teacher_feats = {tid: feats for tid, (_, feats) in teachers.items()}
            self.registry = TeacherRegistry(list(self.teacher_specs.values()))
            self.projections = ProjectionHeads(model.cfg.d_model, list(self.teacher_specs.values())).to(self.dtype)
            pools: dict[str, list[int]] = {}
            for i, s in enumerate(data.samples):
                tid = self.registry.route(s.domain)
                if s.id in self.teacher_feats[tid]:
                    pools.setdefault(s.domain, []).append(i)
            if not pools:
                raise ContractError("no training sample has teacher features")
            self.loader = RoundRobinLoader(pools, plan.batch_size, plan.seed)
        else:
            counts = data.class_counts(model.cfg.n_classes)
            self.weights = torch.as_tensor(class_weights(counts), dtype=self.dtype)
        params = list(self.model.parameters())
        if self.projections is not None:
            params += list(self.projections.parameters())
        self.params = params
        self.optimizer = torch.optim.Adam(params, lr=plan.lr, betas=plan.betas, eps=plan.eps)

    # parameter naming shared by checkpoints
    def named_parameters(self):
        yield from self.model.named_parameters()
        if self.projections is not None:
            for n, p in self.projections.named_parameters():
                yield f"distill.{n}", p

    def trainable_groups(self, step: int) -> frozenset[str]:
        if self.plan.mode == "distill":
            return frozenset({"patching", "encoder", "distill"})
        return phase_of(step, self.plan.phase_boundaries)

    def _set_trainable(self, step: int):
        groups = self.trainable_groups(step)
        owner = self.model.group_of()
        for name, p in self.model.named_parameters():
            on = owner[name] in groups
            if self.plan.mode == "distill" and name.startswith(("patching.stride_learner.", "head.")):
                on = False
            p.requires_grad_(on)
        if self.projections is not None:
            for p in self.projections.parameters():
                p.requires_grad_("distill" in groups)

    def _lr(self, step: int) -> float:
        if self.plan.warmup_steps <= 0:
            return self.plan.lr
        return self.plan.lr * min(1.0, (step + 1) / self.plan.warmup_steps)

    def finetune_loss(self, indices):
        b = len(indices)
        total = 0.0
        stats = {"stride": 0.0, "n": 0.0, "stride_penalty": 0.0, "length_penalty": 0.0, "ce": 0.0}
        for idx, xs, ys in self.data.groups(indices):
            frac = len(idx) / b
            out = self.model(torch.from_numpy(xs).to(self.dtype))
            ce = weighted_ce(out.logits, torch.from_numpy(ys), self.weights)
            st = out.state
            total = total + frac * ce + self.plan.penalty_weight * frac * st.penalty
            for k, v in (("stride", st.stride), ("n", st.n_windows), ("stride_penalty", st.stride_penalty),
                         ("length_penalty", st.length_penalty), ("ce", ce)):
                stats[k] += frac * _num(v)
        return total, stats

    def distill_loss(self, step: int):
        domain, indices = self.loader.batch(step)
        tid = self.registry.route(domain)
        feats = self.teacher_feats[tid]
        b = len(indices)
        loss = 0.0
        stats = {"teacher": tid, "stride": 0.0, "n": 0.0, "stride_penalty": 0.0, "length_penalty": 0.0}
        for idx, xs, _ in self.data.groups(indices):
            target = np.stack([feats[self.data.samples[i].id] for i in idx])
            n_t = target.shape[1]
            s = forced_stride(xs.shape[1], n_t)
            out = self.model(torch.from_numpy(xs).to(self.dtype), forced_stride=s)
            z = self.projections[tid](out.patch_tokens)
            frac = len(idx) / b
            loss = loss + frac * distill_loss(z, torch.from_numpy(target).to(self.dtype))
            st = out.state
            stats["stride"] += frac * s
            stats["n"] += frac * st.n_windows
            stats["stride_penalty"] += frac * _num(st.stride_penalty)
            stats["length_penalty"] += frac * _num(st.length_penalty)
        total = combine_losses({tid: loss}, self.plan.teacher_weights)
        return total, stats

    def train_step(self):
        step = self.step
        self._set_trainable(step)
        for g in self.optimizer.param_groups:
            g["lr"] = self._lr(step)
        self.optimizer.zero_grad(set_to_none=True)
        if self.plan.mode == "distill":
            loss, stats = self.distill_loss(step)
        else:
            indices = epoch_batch(np.arange(len(self.data)), self.plan.batch_size, step, self.plan.seed)
            loss, stats = self.finetune_loss(indices)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}: {stats}")
        loss.backward()
        self.optimizer.step()
        rec = {"step": step, "phase": phase_index(step, self.plan.phase_boundaries) if self.plan.mode == "finetune" else 0,
               "loss": _num(loss), **stats}
        self.result.log.append(rec)
        self.step += 1
        self.result.step = self.step
        return rec

    def run(self, steps: int | None = None, log_file=None):
        target = self.plan.steps if steps is None else self.step + steps
        fh = open(log_file, "a") if log_file else None
        try:
            while self.step < target:
                rec = self.train_step()
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if self.plan.eval_every and self.val is not None and self.step % self.plan.eval_every == 0:
                    self._record_eval()
                if self.plan.checkpoint_every and self.out_dir and self.step % self.plan.checkpoint_every == 0:
                    self.save(self.out_dir / "checkpoint.bin")
        finally:
            if fh:
                fh.close()
        return self.result

    def _record_eval(self):
        if self.plan.mode != "finetune":
            return
        rep = evaluate(self.model, self.val)
        self.result.metrics.append({"step": self.step, "accuracy": rep.accuracy, "macro_f1": rep.macro_f1})
        log.info("step %d: val acc %.2f f1 %.2f", self.step, rep.accuracy, rep.macro_f1)

    # -- checkpointing ----------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {n: p.detach() for n, p in self.named_parameters()}
        for n, p in self.named_parameters():
            st = self.optimizer.state.get(p)
            if st:
                out[f"optim.{n}.exp_avg"] = st["exp_avg"]
                out[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"]
                out[f"optim.{n}.step"] = torch.as_tensor(float(st["step"]), dtype=self.dtype)
        out["trainer.step"] = torch.as_tensor(float(self.step), dtype=self.dtype)
        return out

    def save(self, path):
        save_checkpoint(path, self.state_tensors())

    def load(self, path):
        blob = load_checkpoint(path)
        load_parameters(self.model, blob)
        if self.projections is not None:
            for n, p in self.projections.named_parameters():
                key = f"distill.{n}"
                if key not in blob:
                    raise CheckpointError(f"checkpoint lacks {key}")
                with torch.no_grad():
                    p.copy_(blob[key].to(p.dtype))
        self.optimizer.state.clear()
        for n, p in self.named_parameters():
            if f"optim.{n}.exp_avg" in blob:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(blob[f"optim.{n}.step"])),
                    "exp_avg": blob[f"optim.{n}.exp_avg"].to(p.dtype).clone(),
                    "exp_avg_sq": blob[f"optim.{n}.exp_avg_sq"].to(p.dtype).clone(),
                }
        self.step = int(blob["trainer.step"]) if "trainer.step" in blob else 0
        self.result.step = self.step


def model_tensors(model: StepModel) -> dict[str, torch.Tensor]:
    return {n: p.detach() for n, p in model.named_parameters()}


def load_parameters(model, blob: dict[str, torch.Tensor]):
    """Copy matching tensors into ``model``; missing or mis-shaped entries are errors."""
    own = dict(model.named_parameters())
    for name, p in own.items():
        if name not in blob:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        src = blob[name]
        if tuple(src.shape) != tuple(p.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: {tuple(src.shape)} vs {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(src.to(p.dtype))
    skip = ("distill.", "optim.", "trainer.")
    unknown = [k for k in blob if k not in own and not k.startswith(skip)]
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters: {unknown[:5]}")
    return model
