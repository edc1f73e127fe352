"""Retained-variance curves of the conductivity prior (two correlation
lengths) and of the potential ensemble; prints the mode counts at the usual
thresholds and optionally writes the curves."""

import argparse

import numpy as np

from podeit.offline import solve_ensemble
from podeit.pod import conductivity_pod, potential_pod, variance_curve
from podeit.prior import build_prior, pr2

from _common import add_common, setup


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_common(p)
    args = p.parse_args()
    s = setup(args, build=False)
    short = conductivity_pod(s["prior"], 1.0).eigenvalues
    long = conductivity_pod(build_prior(s["mesh"], pr2()), 1.0).eigenvalues
    ens = solve_ensemble(s["model"], s["prior"], args.samples, args.seed)
    pot = potential_pod(ens.potentials[:, :, 0], 1.0).eigenvalues
    curves = {"sigma_short": variance_curve(short), "sigma_long": variance_curve(long),
              "potential": variance_curve(pot)}
    for name, c in curves.items():
        dims = ", ".join(f"{t:.1%}: {k}" for t, k in c.threshold_dims.items())
        print(f"{name:12s} {dims}")
    if args.output:
        n = 200
        cols = [np.pad(c.values, (0, max(0, n - len(c.values))), constant_values=1.0)[:n]
                for c in curves.values()]
        np.savetxt(args.output, np.column_stack([np.arange(1, n + 1), *cols]), delimiter=",",
                   header="k," + ",".join(curves), comments="", fmt=["%d"] + ["%.10f"] * 3)


if __name__ == "__main__":
    main()
