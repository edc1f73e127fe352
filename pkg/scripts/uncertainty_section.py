"""Two-standard-deviation band along the diagonal for the smooth-blob case,
from the linearized posterior of the full and the reduced estimate."""

import argparse
import csv

import numpy as np

from podeit.approx_error import compose_total_error
from podeit.inversion import chord, map_full, map_reduced, posterior_summary

from _common import add_common, case_data, setup


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_common(p)
    p.add_argument("--points", type=int, default=101)
    args = p.parse_args()
    s = setup(args)
    b = s["build"]
    V, noise, phantom = case_data(s, args, 1)
    r = 14 / np.sqrt(2)
    pts = chord((-r, r), (r, -r), args.points)
    truth = phantom(pts)
    results = {
        "full": map_full(s["model"], s["prior"], noise, V),
        "reduced": map_reduced(b.reduced, b.sigma_basis.eigenvalues, compose_total_error(noise, b.error), V),
    }
    table = [pts[:, 0], pts[:, 1], truth]
    header = ["x", "y", "truth"]
    for name, res in results.items():
        summ = posterior_summary(res, s["mesh"], pts)
        lo, hi = summ.band
        inside = np.mean((truth >= lo) & (truth <= hi))
        print(f"{name}: {inside:.0%} of the section inside the band, "
              f"std from {summ.section_std.min():.3f} to {summ.section_std.max():.3f}")
        table += [summ.section_estimate, summ.section_std]
        header += [f"{name}_estimate", f"{name}_std"]
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(np.column_stack(table).tolist())


if __name__ == "__main__":
    main()
