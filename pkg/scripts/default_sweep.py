"""Sweep that fixes the default SC weight (lam) and AC sigma.

Trains the full model (CE + BAR + SC) for each lam on validation seeds that
the acceptance suite never uses, scores every rule, and writes

* ``sweeps/lambda.csv``: per seed and lam, NN / CS / AC hIoU at each rule's
  best swept parameter;
* ``sweeps/sigma.csv``: AC hIoU over the sigma grid at the chosen lam.

lam is chosen by mean AC hIoU over the seeds; sigma by the mean AC curve.
Run from the repository root: ``python scripts/default_sweep.py``.
"""

import csv
import sys
from pathlib import Path

import numpy as np

from joem.data import SceneSpec, default_split, gen_semantic_table, make_benchmark
from joem.evaluate import sigma_grid, sweep
from joem.model import TrainConfig, train
from joem.pipeline import image_features, prototypes, score_rules

SEEDS = (100, 101)
LAMS = (0.05, 0.1, 0.25, 0.5, 1.0)
EPOCHS = 10


def benchmark(seed):
    table = gen_semantic_table(12, 16, seed)
    split = default_split(12, 4)
    train_set, test_set = make_benchmark(SceneSpec(seed=seed), table, split, 200, 50)
    return table, split, train_set, test_set


def main(out_dir="sweeps"):
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    data = {s: benchmark(s) for s in SEEDS}
    rows, models = [], {}
    for lam in LAMS:
        for seed in SEEDS:
            table, split, train_set, test_set = data[seed]
            params = train(TrainConfig(lam=lam, epochs=EPOCHS, seed=seed), train_set, table, split).params
            models[lam, seed] = params
            sc = score_rules(params, table, split, test_set)
            rows.append({"lam": lam, "seed": seed, "nn": sc.nn.hiou, "cs": sc.cs.hiou,
                         "cs_gamma": sc.cs_param, "ac": sc.ac.hiou, "ac_sigma": sc.ac_param})
            print(rows[-1], flush=True)
    with open(out / "lambda.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    mean_ac = {lam: np.mean([r["ac"] for r in rows if r["lam"] == lam]) for lam in LAMS}
    best_lam = max(LAMS, key=lambda lam: (mean_ac[lam], -lam))

    grid = sigma_grid()
    curves = []
    for seed in SEEDS:
        table, split, _, test_set = data[seed]
        params = models[best_lam, seed]
        pts = sweep(image_features(params, test_set), [s.mask for s in test_set],
                    prototypes(params, table, split), split, "ac", grid)
        curves.append([rep.hiou for _, rep in pts])
    mean_curve = np.mean(curves, axis=0)
    best_sigma = grid[int(np.argmax(mean_curve))]
    with open(out / "sigma.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", *[f"hiou_seed{s}" for s in SEEDS], "mean"])
        for i, sig in enumerate(grid):
            writer.writerow([sig, *[c[i] for c in curves], mean_curve[i]])
    print(f"lam={best_lam} sigma={best_sigma}")


if __name__ == "__main__":
    main(*sys.argv[1:])
