"""Train every checkpoint the Table 1 / similarity acceptance criteria need.

Three seeds x {standard, uat, jr} x {mnist, fashion-mnist}, seed-major so
that partial runs already cover whole seeds. Existing checkpoints are kept.

Usage: python scripts/run_table1_models.py --runs-dir runs --data-dir ~/data
"""
import argparse
import logging

import torch

from uapjr.experiments import ModelSpec, ensure_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs-dir", default="runs")
    ap.add_argument("--data-dir", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--datasets", nargs="+", default=["mnist", "fashion-mnist"])
    ap.add_argument("--kinds", nargs="+", default=["standard", "jr", "uat"])
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    for seed in args.seeds:
        for dataset in args.datasets:
            for kind in args.kinds:
                ensure_model(ModelSpec.table1(dataset, kind, seed), args.runs_dir, args.data_dir,
                             train_missing=True, epochs=args.epochs)


if __name__ == "__main__":
    main()
