"""Shared setup for the experiment scripts: meshes, prior, offline build and data."""

import logging
import time

from podeit.approx_error import measurement_noise
from podeit.cem import CemModel, NoiseSpec, opposite_injection, simulate_measurements
from podeit.mesh import ElectrodeLayout, generate_disk_mesh
from podeit.offline import build_offline
from podeit.phantoms import TEST_CASES, make_phantom
from podeit.prior import build_prior, pr1

Z = 0.01


def add_common(parser):
    parser.add_argument("--elements", type=int, default=2414)
    parser.add_argument("--fine-elements", type=int, default=8394)
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("-o", "--output", default=None, help="CSV file for the results")
    parser.add_argument("-v", "--verbose", action="store_true")


def setup(args, n_sigma=54, n_potential=25, build=True):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    layout = ElectrodeLayout(16, 2.5, 14.0)
    mesh = generate_disk_mesh(layout, args.elements)
    model = CemModel(mesh, Z, opposite_injection(16))
    prior = build_prior(mesh, pr1())
    out = {"mesh": mesh, "model": model, "prior": prior, "layout": layout}
    if build:
        t0 = time.perf_counter()
        out["build"] = build_offline(model, prior, args.samples, args.seed,
                                     n_sigma=n_sigma, n_potential=n_potential)
        print(f"offline build: {time.perf_counter() - t0:.1f} s")
    return out


def case_data(setup_dict, args, case):
    fine = setup_dict.get("fine")
    if fine is None:
        fine = setup_dict["fine"] = generate_disk_mesh(setup_dict["layout"], args.fine_elements)
    phantom = make_phantom(TEST_CASES[case])
    V, _ = simulate_measurements(fine, phantom, Z, setup_dict["model"].protocol, NoiseSpec(),
                                 100 + case, setup_dict["mesh"])
    return V, measurement_noise(V, NoiseSpec()), phantom
