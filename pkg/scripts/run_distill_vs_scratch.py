"""Distill against the audio-like teacher, fine-tune on chirps, compare with scratch."""
import argparse
import json

from stepts.experiments import distill_then_finetune


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--distill-steps", type=int, default=600)
    p.add_argument("--finetune-steps", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=1000)
    args = p.parse_args()
    for seed in args.seeds:
        r = distill_then_finetune(seed, length=args.length, distill_steps=args.distill_steps,
                                  finetune_steps=args.finetune_steps, n_val=args.n_val)
        print(json.dumps({"seed": seed, "distilled": r.distilled, "scratch": r.scratch,
                          "first_loss": r.first_loss, "final_loss": r.final_loss, "ratio": r.loss_ratio}),
              flush=True)


if __name__ == "__main__":
    main()
