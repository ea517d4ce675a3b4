"""u histograms at the start and end of a sparse-init run (one seed).

Writes ``hist_start.dat`` / ``hist_end.dat`` two-column tables and the matching
CSVs into ``--out-dir``.
"""

import argparse
import json
from pathlib import Path

from ugsplat.experiments import SPARSE_SCENE, build, pooled_uncertainty
from ugsplat.metrics import histogram
from ugsplat.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--bins", type=int, default=50)
    ap.add_argument("--out-dir", default="uncertainty_hist")
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    trainer = build(SPARSE_SCENE, args.seed,
                    TrainConfig(iterations=args.iterations, seed=args.seed, eval_interval=500))
    for tag in ("start", "end"):
        if tag == "end":
            trainer.run()
        hist = histogram(pooled_uncertainty(trainer), args.bins, trainer.state.iteration)
        hist.write_csv(out / f"hist_{tag}.csv")
        hist.write_plot_table(out / f"hist_{tag}.dat")
        print(tag, json.dumps(hist.summary()))


if __name__ == "__main__":
    main()
