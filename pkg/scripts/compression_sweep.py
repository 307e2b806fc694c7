"""Uplink bytes and final validation loss as a function of the top-n layer budget."""

import argparse
from pathlib import Path

import numpy as np

from common import ARCH, N_CLIENTS, N_SAMPLES, N_VALIDATION, SCENE, config, write_rows
from fedvisor.compression import ALL
from fedvisor.sim import make_dataset, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--out", type=Path, default=Path("results/compression.csv"))
    args = p.parse_args()

    shards, val = make_dataset(N_SAMPLES, N_CLIENTS, args.seed, SCENE, n_validation=N_VALIDATION)
    L = len(ARCH.hidden_sizes) + 1
    full = None
    rows = []
    for n in [ALL, *range(L, 0, -1)]:
        report = simulate(config(args.seed, rounds=args.rounds, compression_n=n), shards, val)
        uplink = np.mean([m.uplink_bytes for m in report.rounds])
        full = full or uplink
        rows.append((n, int(uplink), uplink / full, report.rounds[-1].global_loss, report.final_digest))
        print(f"n={n}: mean uplink {uplink:.0f} B ({uplink / full:.1%}), final loss {report.rounds[-1].global_loss:.4f}")
    write_rows(args.out, ["n", "mean_uplink_bytes", "fraction_of_full", "final_loss", "final_digest"], rows)


if __name__ == "__main__":
    main()
