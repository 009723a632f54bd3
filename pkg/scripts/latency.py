"""estimate() latency for fixed-length random paths replayed over a
synthetic test day."""

import argparse

import numpy as np

from htte import bench
from htte.estimator import EngineConfig
from htte.partition import PartitionConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--path-len", type=int, nargs="+", default=[5, 10, 20])
    p.add_argument("--max-points", type=int, default=1500)
    args = p.parse_args()

    config = EngineConfig(partition=PartitionConfig(max_points_per_model=args.max_points))
    print(f"{'segments':>8} {'queries':>7} {'median ms':>9} {'p99 ms':>7} {'max ms':>7}")
    for n in args.path_len:
        lat = bench.latency_run(args.seed, n, config)
        print(f"{n:>8} {len(lat):>7} {np.median(lat):>9.2f} {np.percentile(lat, 99):>7.2f} {lat.max():>7.2f}")


if __name__ == "__main__":
    main()
