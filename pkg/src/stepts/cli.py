"""Command-line entry point: ``stepts <command> [flags]``.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.
Failures also emit one JSON line on stderr: {"error": kind, "message": ...}.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import EncoderConfig, TrainPlan, apply_section, flat_dict, read_ini, write_ini
from .data.dataset import load_split, split_names, write_dataset
from .data.io import FormatError, ValidationError, read_manifest, read_signal
from .data.synth import SignalSpec
from .data.teachers import FrozenTeacher, TeacherInputError, preset, read_feature_store, write_feature_store
from .distill import AlignmentError, RoutingError
from .encoder import StepModel
from .gradcheck import TOLERANCE, run_checks
from .numeric import CheckpointError, ContractError, NumericError, load_checkpoint
from .training import Trainer, evaluate, load_parameters

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ERRORS = (FormatError, ValidationError, FileNotFoundError, TeacherInputError, AlignmentError, RoutingError,
               CheckpointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


@dataclass
class RunConfig:
    command: str
    out: str
    seed: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    plan: TrainPlan = field(default_factory=TrainPlan)
    extra: dict[str, str] = field(default_factory=dict)

    def sections(self) -> dict[str, dict[str, str]]:
        return {
            "run": {"command": self.command, "out": self.out, "seed": str(self.seed), **self.extra},
            "encoder": flat_dict(self.encoder),
            "patching": flat_dict(self.encoder.patching),
            "train": flat_dict(self.plan),
        }

    def save(self, path):
        write_ini(path, self.sections())


def load_model_config(sections: dict[str, dict[str, str]]) -> EncoderConfig:
    encoder = EncoderConfig.desk()
    apply_section(encoder.patching, sections.get("patching", {}))
    apply_section(encoder, sections.get("encoder", {}))
    encoder.validate()
    return encoder


def resolve(args, command: str) -> RunConfig:
    sections = read_ini(args.config) if getattr(args, "config", None) else {}
    unknown = set(sections) - {"run", "encoder", "patching", "train"}
    if unknown:
        raise ContractError(f"unknown config sections: {sorted(unknown)}")
    encoder = load_model_config(sections)
    plan = TrainPlan(mode="distill" if command == "distill" else "finetune")
    apply_section(plan, sections.get("train", {}))
    run = dict(sections.get("run", {}))
    seed = int(run.pop("seed", plan.seed))
    if os.environ.get("STEP_SEED"):
        seed = int(os.environ["STEP_SEED"])
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    plan.seed = seed
    if getattr(args, "steps", None) is not None:
        plan.steps = args.steps
    if getattr(args, "precision", None):
        plan.precision = args.precision
    if getattr(args, "fixed_patching", False):
        encoder.fixed_patching = True
    if getattr(args, "t_thres", None) is not None:
        encoder.t_thres = args.t_thres
    if getattr(args, "no_stats_token", False):
        encoder.stats_token = False
    plan.__post_init__()
    encoder.validate()
    extra = {k: str(v) for k, v in vars(args).items()
             if k not in ("func", "config", "out", "seed") and v is not None and not isinstance(v, bool)}
    return RunConfig(command, str(args.out), seed, encoder, plan, extra)


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_all(seed: int):
    torch.manual_seed(seed)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    sections = read_ini(args.spec)
    spec = SignalSpec()
    apply_section(spec, sections.get("signal", {}))
    spec.__post_init__()
    ds = sections.get("dataset", {})
    n_train = int(ds.get("n_train", 20000)) if args.n_train is None else args.n_train
    n_val = int(ds.get("n_val", 4000)) if args.n_val is None else args.n_val
    out = prepare_out(args.out, args.force)
    write_ini(out / "spec.ini", {"signal": flat_dict(spec), "dataset": {"n_train": str(n_train), "n_val": str(n_val)}})
    records = write_dataset(spec, out, n_train, n_val)
    print(json.dumps({"samples": len(records), "out": str(out)}))
    return EXIT_OK


def cmd_gen_teacher_features(args) -> int:
    spec = preset(args.teacher)
    records = read_manifest(args.data)
    teacher = FrozenTeacher(spec)
    out = Path(args.out)
    target = out / spec.teacher_id
    if target.exists() and any(target.iterdir()):
        if not args.force:
            raise UsageError(f"feature store {target} exists; pass --force to overwrite")
        shutil.rmtree(target)
    feats = {}
    for r in records:
        if args.split and r.split != args.split:
            continue
        if r.domain != spec.domain and not args.any_domain:
            continue
        feats[r.id] = teacher(read_signal(Path(args.data) / r.path))
    root = write_feature_store(out, spec, feats)
    print(json.dumps({"teacher": spec.teacher_id, "samples": len(feats), "out": str(root)}))
    return EXIT_OK


def _build_model(cfg: RunConfig, init: str | None) -> StepModel:
    _seed_all(cfg.seed)
    model = StepModel(cfg.encoder)
    if init:
        load_parameters(model, load_checkpoint(init))
    return model


def _load_data(path, split):
    if split not in split_names(path):
        raise ValidationError(f"dataset {path} has no {split!r} split")
    return load_split(path, split)


def _write_metrics(out: Path, rep):
    (out / "metrics.json").write_text(rep.to_json())
    (out / "metrics.csv").write_text(rep.to_table())


def cmd_train(args) -> int:
    cfg = resolve(args, "train")
    out = prepare_out(args.out, args.force)
    cfg.save(out / "run.ini")
    model = _build_model(cfg, args.init)
    data = _load_data(args.data, "train")
    val = load_split(args.data, "val") if "val" in split_names(args.data) else None
    trainer = Trainer(cfg.plan, model, data, val, out_dir=out)
    trainer.run(log_file=out / "steps.jsonl")
    trainer.save(out / "checkpoint.bin")
    summary = {"steps": trainer.step, "out": str(out)}
    if val is not None and len(val):
        rep = evaluate(trainer.model, val)
        _write_metrics(out, rep)
        summary.update(accuracy=rep.accuracy, macro_f1=rep.macro_f1)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = resolve(args, "distill")
    out = prepare_out(args.out, args.force)
    cfg.save(out / "run.ini")
    teachers = {}
    for path in filter(None, (p.strip() for p in args.teachers.split(","))):
        spec, feats = read_feature_store(path)
        teachers[spec.teacher_id] = (spec, feats)
    if not teachers:
        raise UsageError("--teachers needs at least one feature store")
    model = _build_model(cfg, args.init)
    data = _load_data(args.data, "train")
    trainer = Trainer(cfg.plan, model, data, teachers=teachers, out_dir=out)
    trainer.run(log_file=out / "steps.jsonl")
    trainer.save(out / "checkpoint.bin")
    first, last = trainer.result.log[0]["loss"], trainer.result.log[-1]["loss"]
    print(json.dumps({"steps": trainer.step, "first_loss": first, "last_loss": last, "out": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    run_ini = Path(args.config) if args.config else ckpt.parent / "run.ini"
    if not run_ini.exists():
        raise FileNotFoundError(f"no run config at {run_ini}; pass --config")
    model = StepModel(load_model_config(read_ini(run_ini)))
    load_parameters(model, load_checkpoint(ckpt))
    data = _load_data(args.data, args.split)
    rep = evaluate(model, data)
    if args.out:
        out = prepare_out(args.out, args.force)
        _write_metrics(out, rep)
    print(json.dumps({"accuracy": rep.accuracy, "macro_f1": rep.macro_f1, "samples": len(data)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_checks(args.scope, args.points, 0 if args.seed is None else args.seed)
    worst = max(r.worst for r in results)
    for r in results:
        print(f"{r.op:22s} points={r.points} worst={r.worst:.3e} {r.seconds:6.2f}s {'ok' if r.ok else 'FAIL'}")
    ok = worst <= TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'}, worst rel err {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stepts", description="Adaptive-patching time-series encoder: data, distillation, training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="INI file with a [signal] section (and optional [dataset])")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--n-train", type=int, help="number of training samples (default 20000)")
    g.add_argument("--n-val", type=int, help="number of validation samples (default 4000)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("gen-teacher-features", help="precompute frozen teacher features")
    t.add_argument("--teacher", required=True, help="teacher preset: audio-like, ts-like, neural-like")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="feature store root; features go to <out>/<teacher_id>")
    t.add_argument("--split", default="train", help="split to featurize (empty string for all)")
    t.add_argument("--any-domain", action="store_true", help="featurize samples of any domain tag")
    t.add_argument("--force", action="store_true", help="overwrite an existing feature store")
    t.set_defaults(func=cmd_gen_teacher_features)

    def model_flags(q):
        q.add_argument("--config", help="INI run config with [run]/[encoder]/[patching]/[train] sections")
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--out", required=True, help="output run directory")
        q.add_argument("--init", help="checkpoint to initialize model parameters from")
        q.add_argument("--seed", type=int, help="seed (overrides STEP_SEED and the config)")
        q.add_argument("--steps", type=int, help="number of optimization steps")
        q.add_argument("--precision", choices=["train", "test"], help="train = 32-bit, test = 64-bit")
        q.add_argument("--fixed-patching", action="store_true", help="fixed ceil(L/T_thres) pooling baseline")
        q.add_argument("--t-thres", type=int, help="pool size threshold of the fixed baseline (default 200)")
        q.add_argument("--no-stats-token", action="store_true", help="drop the statistics token")
        q.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    d = sub.add_parser("distill", help="multi-teacher distillation pretraining")
    model_flags(d)
    d.add_argument("--teachers", required=True, help="comma-separated feature store directories")
    d.set_defaults(func=cmd_distill)

    tr = sub.add_parser("train", help="fine-tune on a labeled dataset")
    model_flags(tr)
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="val", help="split name (default val)")
    e.add_argument("--config", help="run config (default: run.ini beside the checkpoint)")
    e.add_argument("--out", help="directory for metrics.json and metrics.csv")
    e.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient oracle suite")
    c.add_argument("--scope", default="all", choices=["patching", "encoder", "distill", "all"])
    c.add_argument("--points", type=int, default=20, help="random points per operation")
    c.add_argument("--seed", type=int, help="base seed")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        _emit_error("data", str(exc))
        return EXIT_DATA
    except NumericError as exc:
        _emit_error("numeric", str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
