"""Fixed-patching and no-stats-token ablations on a chirp task with random offsets and scales."""
import argparse
import json

import torch

from stepts.config import EncoderConfig, TrainPlan
from stepts.data.synth import SignalSpec
from stepts.encoder import StepModel
from stepts.experiments import chirp_splits, finetune

VARIANTS = {
    "full": {},
    "fixed_patching": {"fixed_patching": True},
    "no_stats_token": {"stats_token": False},
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-val", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    spec = SignalSpec(length_min=args.length, length_max=args.length, log10_scale=(-2, 2), offset=(-5, 5))
    train, val = chirp_splits(spec, args.n_train, args.n_val)
    bounds = (args.steps // 3, 2 * args.steps // 3)
    for name, kw in VARIANTS.items():
        torch.manual_seed(args.seed)
        model = StepModel(EncoderConfig.desk(**kw))
        rep = finetune(model, train, val, TrainPlan(steps=args.steps, seed=args.seed, phase_boundaries=bounds))
        print(json.dumps({"variant": name, "accuracy": rep.accuracy, "macro_f1": rep.macro_f1,
                          "seconds": round(rep.seconds, 1)}), flush=True)


if __name__ == "__main__":
    main()
