"""Upload-time model over payload size and bandwidth.

The default 5 s fixed overhead is a calibration choice that makes a 230 MB
upload at 15 MB/s take about 20 s. It is not a measured constant. With
--measured, the sweep also reports simulated upload times of actual frames
from a compressed run.
"""

import argparse
from pathlib import Path

from common import ARCH, N_CLIENTS, N_SAMPLES, SCENE, config, write_rows
from fedvisor.compression import ALL
from fedvisor.scheduler import MB, simulate_upload_time
from fedvisor.sim import make_dataset, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--overhead", type=float, default=5.0)
    p.add_argument("--sizes-mb", type=float, nargs="+", default=[1, 10, 50, 100, 230, 500])
    p.add_argument("--bandwidths", type=float, nargs="+", default=[1, 5, 10, 15, 50])
    p.add_argument("--measured", action="store_true")
    p.add_argument("--out", type=Path, default=Path("results/upload_time.csv"))
    args = p.parse_args()

    rows = [
        (size, bw, simulate_upload_time(size * MB, bw, args.overhead))
        for size in args.sizes_mb
        for bw in args.bandwidths
    ]
    write_rows(args.out, ["size_mb", "bandwidth_MBps", "upload_s"], rows)
    print(f"230 MB at 15 MB/s: {simulate_upload_time(230 * MB, 15, args.overhead):.2f} s")

    if args.measured:
        shards, _ = make_dataset(N_SAMPLES, N_CLIENTS, 0, SCENE)
        L = len(ARCH.hidden_sizes) + 1
        measured = []
        for n in [ALL, *range(L - 1, 0, -1)]:
            report = simulate(config(0, rounds=3, compression_n=n, upload_overhead_s=args.overhead), shards)
            for m in report.rounds:
                measured.append((n, m.round, m.uplink_bytes, m.simulated_upload_s))
        write_rows(args.out.with_name("upload_time_measured.csv"), ["n", "round", "uplink_bytes", "simulated_upload_s"], measured)


if __name__ == "__main__":
    main()
