"""Train the 20-Gaussian toy scene and print the train-PSNR trajectory."""

import argparse
import json

from ugsplat.experiments import toy_convergence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--no-uncertainty", action="store_true")
    args = ap.parse_args()
    for seed in args.seeds:
        res = toy_convergence(seed, args.iterations, use_uncertainty=not args.no_uncertainty)
        curve = [(r["iteration"], round(r["train_psnr"], 2)) for r in res.log
                 if r["train_psnr"] is not None]
        print(json.dumps({"seed": seed, "train_psnr": res.train_psnr,
                          "seconds": round(res.seconds, 1), "curve": curve}))


if __name__ == "__main__":
    main()
