"""Qualitative outputs for one trained setup: scene cleaning, NN vs direct
reconstruction on test scenes, closest/furthest-input diagnostics and a
PCA-2 latent export.

    python3 scripts/make_figures.py --setup tae --seed 0 --out results/figures
"""

import argparse
import json
from pathlib import Path

import numpy as np

from illumnorm.evaluation import (
    export_latents,
    extremes_grid,
    invariance_score,
    nn_comparison_grid,
    recon_extremes,
    save_grid,
    scene_cleaning_grid,
)
from illumnorm.experiments import DeskRuns, desk_data
from illumnorm.latent_index import build_index


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--setup", default="tae")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenes", type=int, default=4, help="test scenes to show")
    ap.add_argument("--out", default="results/figures")
    args = ap.parse_args()

    train_m, test_m = desk_data()
    model = DeskRuns(train_m).model(args.setup, args.seed)
    out = Path(args.out) / f"{args.setup}-s{args.seed}"
    out.mkdir(parents=True, exist_ok=True)

    for s in test_m.scenes[: args.scenes]:
        save_grid(scene_cleaning_grid(model, s), out / f"clean-scene{s.scene_id}.png")
        save_grid(extremes_grid(recon_extremes(model, s)), out / f"extremes-scene{s.scene_id}.png")
    index = build_index(model, train_m)
    queries = [s.image(0) for s in test_m.scenes[: args.scenes]]
    save_grid(nn_comparison_grid(model, index, np.stack(queries)), out / "nn-vs-direct.png")
    export_latents(model, train_m, "pca2").to_csv(out / "latents-pca2.csv")
    rs, ins = invariance_score(model, test_m)
    (out / "invariance.json").write_text(json.dumps({"recon_score": rs, "input_score": ins}, indent=2) + "\n")
    print(f"wrote {out}; test invariance recon={rs:.4f} input={ins:.4f}")


if __name__ == "__main__":
    main()
