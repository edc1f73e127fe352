"""Full against reduced reconstruction of the three test cases: wall time
(median over repeats) and relative error to the phantom."""

import argparse
import csv

import numpy as np

from podeit.approx_error import compose_total_error
from podeit.inversion import map_full, map_reduced
from podeit.phantoms import relative_error

from _common import add_common, case_data, setup


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_common(p)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    s = setup(args)
    b = s["build"]
    rows = []
    for case in (1, 2, 3):
        V, noise, phantom = case_data(s, args, case)
        truth = phantom(s["mesh"].vertices)
        total = compose_total_error(noise, b.error)
        tf, tr = [], []
        for _ in range(args.repeats):
            rf = map_full(s["model"], s["prior"], noise, V)
            rr = map_reduced(b.reduced, b.sigma_basis.eigenvalues, total, V)
            tf.append(rf.wall_time)
            tr.append(rr.wall_time)
        tf, tr = float(np.median(tf)), float(np.median(tr))
        ef = relative_error(s["mesh"], rf.estimate, truth)
        er = relative_error(s["mesh"], rr.estimate, truth)
        rows.append([case, tf, tr, tf / tr, ef, er, rf.iterations, rr.iterations])
        print(f"case {case}: full {tf:.2f} s ({rf.iterations} it), reduced {tr * 1e3:.1f} ms "
              f"({rr.iterations} it), speedup {tf / tr:.0f}x, error {ef:.4f} / {er:.4f}")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "t_full", "t_reduced", "speedup", "error_full", "error_reduced",
                        "iterations_full", "iterations_reduced"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
