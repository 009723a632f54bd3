"""Segment vs pathlet granularity on a synthetic city: GP sub-queries per
query and MAE, for a range of minimum supports."""

import argparse

from htte import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--min-support", type=int, nargs="+", default=[5])
    args = p.parse_args()

    print(f"{'min_support':>11} {'pathlets':>8} {'subq seg':>8} {'subq pl':>8} {'reduction':>9} {'MAE seg':>8} {'MAE pl':>8} {'degr.':>7}")
    for ms in args.min_support:
        r = bench.pathlet_run(args.seed, ms)
        print(f"{ms:>11} {r.dictionary_size:>8} {r.subq_segments:>8.2f} {r.subq_pathlets:>8.2f} {r.reduction:>8.2f}x {r.mae_segments:>8.1f} {r.mae_pathlets:>8.1f} {r.degradation:>+7.1%}")


if __name__ == "__main__":
    main()
