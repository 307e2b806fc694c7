"""Federated model vs each client trained alone, under class-skewed shards (each client misses one class)."""

import argparse
from pathlib import Path

from common import N_CLIENTS, N_SAMPLES, N_VALIDATION, SCENE, config, write_rows
from fedvisor.annotation import PartitionMode
from fedvisor.evaluate import evaluate
from fedvisor.sim import make_dataset, simulate, train_alone


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    p.add_argument("--mode", default="skew:1.0:drop")
    p.add_argument("--out", type=Path, default=Path("results/federation_benefit.csv"))
    args = p.parse_args()

    rows = []
    for seed in args.seeds:
        shards, val = make_dataset(N_SAMPLES, N_CLIENTS, seed, SCENE, PartitionMode.parse(args.mode), N_VALIDATION)
        cfg = config(seed)
        fed = evaluate(simulate(cfg, shards, val).final_model, val)
        alone = [evaluate(train_alone(cfg, s), val) for s in shards]
        best = max(a.class_accuracy for a in alone)
        rows.append((seed, fed.class_accuracy, best, *[a.class_accuracy for a in alone]))
        print(f"seed {seed}: federated {fed.class_accuracy:.3f}  best single client {best:.3f}")
    write_rows(args.out, ["seed", "federated", "best_alone", *[f"alone_{s.client_id}" for s in shards]], rows)


if __name__ == "__main__":
    main()
