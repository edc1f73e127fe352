"""Reduced reconstructions of one test case over a grid of basis sizes; the
reduction error model is re-estimated for every cell."""

import argparse
import csv

from podeit.approx_error import compose_total_error
from podeit.inversion import map_reduced
from podeit.offline import truncated
from podeit.phantoms import relative_error

from _common import add_common, case_data, setup


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_common(p)
    p.add_argument("--case", type=int, default=2)
    p.add_argument("--n-sigma", default="5,15,30,45,54")
    p.add_argument("--n-potential", default="5,10,15,20,25")
    args = p.parse_args()
    ns = [int(x) for x in args.n_sigma.split(",")]
    ms = [int(x) for x in args.n_potential.split(",")]
    s = setup(args, max(ns), max(ms))
    V, noise, phantom = case_data(s, args, args.case)
    truth = phantom(s["mesh"].vertices)
    lam = s["build"].sigma_basis.eigenvalues
    rows = []
    print("N^ \\ M^ " + "".join(f"{m:>9d}" for m in ms))
    for K in ns:
        line = []
        for m in ms:
            rom, err = truncated(s["build"], K, m)
            r = map_reduced(rom, lam, compose_total_error(noise, err), V)
            e = relative_error(s["mesh"], r.estimate, truth)
            rows.append([K, m, e, r.wall_time, r.iterations])
            line.append(e)
        print(f"{K:7d} " + "".join(f"{e:9.4f}" for e in line))
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_sigma", "n_potential", "relative_error", "wall_time", "iterations"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
