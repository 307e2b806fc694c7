"""Validation-loss curves and held-out IOU for the 4-client synthetic task, one run per seed."""

import argparse
from pathlib import Path

from common import N_CLIENTS, N_SAMPLES, N_VALIDATION, SCENE, config, write_rows
from fedvisor.evaluate import evaluate
from fedvisor.sim import make_dataset, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--out", type=Path, default=Path("results/convergence"))
    args = p.parse_args()

    summary = []
    for seed in args.seeds:
        shards, val = make_dataset(N_SAMPLES, N_CLIENTS, seed, SCENE, n_validation=N_VALIDATION)
        report = simulate(config(seed, rounds=args.rounds), shards, val)
        write_rows(args.out / f"seed{seed}.csv", ["round", "global_loss"], [(m.round, m.global_loss) for m in report.rounds])
        ev = evaluate(report.final_model, val)
        ratio = report.rounds[-1].global_loss / report.rounds[0].global_loss
        summary.append((seed, report.rounds[0].global_loss, report.rounds[-1].global_loss, ratio, ev.mean_iou, ev.class_accuracy))
        print(f"seed {seed}: loss ratio {ratio:.3f}  mean IOU {ev.mean_iou:.3f}  class acc {ev.class_accuracy:.3f}")
    write_rows(args.out / "summary.csv", ["seed", "loss_round1", "loss_final", "ratio", "mean_iou", "class_accuracy"], summary)


if __name__ == "__main__":
    main()
