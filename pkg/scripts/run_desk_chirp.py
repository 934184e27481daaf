"""Desk-scale chirp detection: desk preset, batch 32, default three-phase schedule."""
import argparse
import json

from stepts.experiments import desk_chirp


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--n-train", type=int, default=20000)
    p.add_argument("--n-val", type=int, default=4000)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--snr", type=float, nargs=2, default=[1.5, 3.0], help="amplitude SNR band")
    args = p.parse_args()
    rep = desk_chirp(args.length, args.n_train, args.n_val, args.steps, args.seed, args.eval_every, tuple(args.snr))
    last = rep.log[-1]
    print(json.dumps({"accuracy": rep.accuracy, "macro_f1": rep.macro_f1, "seconds": round(rep.seconds, 1),
                      "curve": rep.curve, "final_stride": last["stride"], "final_n": last["n"]}))


if __name__ == "__main__":
    main()
