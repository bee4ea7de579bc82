"""Train every setup on the desk-scale dataset and write the accuracy table.

    python3 scripts/run_sweep.py --out results/sweep --seeds 5

Checkpoints land in the shared cache (``$ILLUMNORM_CACHE``), so the
acceptance suite and ``make_figures.py`` reuse them.
"""

import argparse
import logging
from pathlib import Path

from illumnorm.evaluation import ALL_SETUPS, ClassifierConfig, multi_seed_report
from illumnorm.experiments import DESK_ARCH, DESK_TRAIN, DeskRuns, desk_data


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/sweep")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--setups", default="ae,vae,tae,tae-v", help=f"comma list from {','.join(ALL_SETUPS)}")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_m, test_m = desk_data()
    runs = DeskRuns(train_m)
    clf = ClassifierConfig(epochs=DESK_TRAIN.epochs, batch_size=DESK_TRAIN.batch_size, lr=DESK_TRAIN.lr)
    report = multi_seed_report(
        DESK_ARCH,
        DESK_TRAIN,
        train_m,
        test_m,
        seeds=range(args.seeds),
        setups=tuple(args.setups.split(",")),
        classifier=clf,
        cache_dir=runs.cache_dir,
        jobs=args.jobs,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    (out / "table.txt").write_text(report.table() + "\n")
    print(report.table())


if __name__ == "__main__":
    main()
