#!/usr/bin/env python3
"""Time the smoothing gradient kernel across grid sizes and print the scaling
table (element count quadruples per row; the time ratio should track it)."""

import argparse

from meshgrad.apps.smooth import bench_gradient


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="64,128,256,512")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    rows = bench_gradient(tuple(int(s) for s in args.sizes.split(",")),
                          repeats=args.repeats, workers=args.threads)
    print(f"{'side':>6} {'vertices':>10} {'edges':>10} {'ms/iter':>10} {'ratio':>7}")
    for r in rows:
        ratio = f"{r['ratio']:.2f}" if r["ratio"] == r["ratio"] else "-"
        print(f"{r['side']:>6} {r['vertices']:>10} {r['edges']:>10} {r['ms_per_iter']:>10.3f} {ratio:>7}")


if __name__ == "__main__":
    main()
