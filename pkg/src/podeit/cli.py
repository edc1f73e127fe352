"""Command line: mesh, simulate, build-rom, reconstruct, benchmark, rom describe."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io
from .approx_error import compose_total_error, measurement_noise
from .cem import CemModel, NoiseSpec, opposite_injection, simulate_measurements
from .errors import PodEitError, UserError
from .inversion import GnConfig, chord, map_full, map_reduced, posterior_summary
from .mesh import ElectrodeLayout, generate_disk_mesh, validate_mesh
from .offline import build_offline, truncated
from .phantoms import TEST_CASES, make_phantom, relative_error
from .prior import SmoothnessKernel, build_prior

log = logging.getLogger("podeit")


@dataclass
class RunConfig:
    """Settings shared by all subcommands; config files and flags override
    these defaults."""

    electrodes: int = 16
    width: float = 2.5
    diameter: float = 28.0
    elements: int = 2414
    impedance: float = 0.01
    amplitude: float = 1.0
    variance: float = 0.25
    correlation_length: float = 4.0
    nugget: float = 1e-4
    mean: float = 3.0
    samples: int = 2000
    retain: float = 0.99
    retain_potential: float = 0.99
    n_sigma: int = 0  # 0: use the retained-variance rule
    n_potential: int = 0
    noise_relative: float = 0.01
    noise_range: float = 0.001
    max_iterations: int = 50
    tolerance: float = 1e-6
    seed: int = 0

    @classmethod
    def from_sources(cls, path=None, overrides=None) -> "RunConfig":
        values = {}
        if path:
            values.update(io.read_config(path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise UserError(f"unknown config key {k!r}")
            kind = {"int": int, "float": float}[known[k]]
            try:
                kwargs[k] = kind(v)
            except ValueError as exc:
                raise UserError(f"config key {k!r}: cannot read {v!r} as {known[k]}") from exc
        return cls(**kwargs)

    def layout(self) -> ElectrodeLayout:
        return ElectrodeLayout(self.electrodes, self.width, self.diameter / 2)

    def kernel(self) -> SmoothnessKernel:
        return SmoothnessKernel(self.variance, self.correlation_length, self.nugget)

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.noise_relative, self.noise_range)

    def gn(self) -> GnConfig:
        return GnConfig(self.max_iterations, self.tolerance)

    def floor(self) -> float:
        return 1e-3 * self.mean


def _out(args, name) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _params(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UserError(f"phantom parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except ValueError as exc:
            raise UserError(f"phantom parameter {k}: {v!r} is not valid JSON") from exc
        if isinstance(out[k], list):
            out[k] = tuple(tuple(x) if isinstance(x, list) else x for x in out[k])
    return out


# subcommands ------------------------------------------------------------

def cmd_mesh(args, cfg: RunConfig) -> int:
    mesh = generate_disk_mesh(cfg.layout(), cfg.elements)
    issues = validate_mesh(mesh)
    path = Path(args.output) if args.output else _out(args, f"mesh_{cfg.elements}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    io.save_mesh(mesh, path)
    print(f"{path}: {mesh.n_elements} elements, N={mesh.n_linear_nodes}, "
          f"M={mesh.n_quadratic_nodes}, hash {mesh.content_hash()}")
    for issue in issues:
        print(f"invalid: {issue.kind} {issue.message}", file=sys.stderr)
    return 3 if issues else 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    fine = io.load_mesh(args.mesh)
    recon = io.load_mesh(args.reconstruction_mesh) if args.reconstruction_mesh else None
    protocol = opposite_injection(fine.n_electrodes, cfg.amplitude)
    phantom = make_phantom(args.phantom, radius=fine.radius, **_params(args.param))
    spec = NoiseSpec(0.0, 0.0) if args.zero_noise else cfg.noise()
    V, e = simulate_measurements(fine, phantom, cfg.impedance, protocol, spec, cfg.seed, recon)
    path = Path(args.output) if args.output else _out(args, f"data_{args.phantom}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    io.save_measurements(path, V, protocol, noise=e)
    io.dump_json({
        "phantom": args.phantom, "phantom_params": repr(phantom), "seed": cfg.seed,
        "noise": asdict(spec), "impedance": cfg.impedance,
        "inputs": {"mesh": fine.content_hash()}, "data_hash": io.file_hash(path),
    }, path.with_suffix(".json"))
    print(f"{path}: {len(V)} measurements")
    return 0


def cmd_build_rom(args, cfg: RunConfig) -> int:
    mesh = io.load_mesh(args.mesh)
    protocol = opposite_injection(mesh.n_electrodes, cfg.amplitude)
    model = CemModel(mesh, cfg.impedance, protocol, floor=cfg.floor())
    prior = build_prior(mesh, cfg.kernel(), cfg.mean)
    path = Path(args.output) if args.output else Path(args.cache) / "rom.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    inputs = {"mesh": mesh.content_hash(), "prior": prior.content_hash(),
              "samples": cfg.samples, "seed": cfg.seed,
              "n_sigma": cfg.n_sigma, "n_potential": cfg.n_potential,
              "retain": cfg.retain, "retain_potential": cfg.retain_potential,
              "rotate": not args.per_injection_bases, "impedance": cfg.impedance,
              "fresh_error_samples": bool(args.fresh_error_samples)}
    if path.exists():
        _, meta = io.load_cache(path)
        io.check_inputs(meta, inputs, path, args.force)
    t0 = time.perf_counter()
    build = build_offline(
        model, prior, cfg.samples, cfg.seed, cfg.retain, cfg.retain_potential,
        cfg.n_sigma or None, cfg.n_potential or None,
        rotate=not args.per_injection_bases,
        error_seed=cfg.seed + 1 if args.fresh_error_samples else None,
    )
    offline = time.perf_counter() - t0
    io.save_rom(path, build.reduced, build.error, {
        "inputs": inputs, "timings": build.timings, "offline_seconds": offline,
        "impedance": cfg.impedance, "seed": cfg.seed,
    })
    summary = build.error.summary()
    io.dump_json({"inputs": inputs, "dims": build.dims, "error_model": summary,
                  "timings": build.timings, "rom_hash": build.reduced.content_hash()},
                 path.with_suffix(".json"))
    print(f"{path}: N^={build.dims[0]} M^={build.dims[1]}; offline {offline:.1f} s "
          f"(ensemble {build.timings['ensemble']:.1f} s)")
    return 0


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    mesh = io.load_mesh(args.mesh)
    V = io.load_measurements(args.data)
    protocol = opposite_injection(mesh.n_electrodes, cfg.amplitude)
    noise = measurement_noise(V, cfg.noise())
    results = {}
    methods = ["full", "reduced"] if args.method == "both" else [args.method]
    for method in methods:
        if method == "full":
            model = CemModel(mesh, cfg.impedance, protocol, floor=cfg.floor())
            prior = build_prior(mesh, cfg.kernel(), cfg.mean)
            res = map_full(model, prior, noise, V, cfg.gn())
        else:
            if not args.rom:
                raise UserError("--rom is required for reduced reconstruction")
            rom, error, meta = io.load_rom(args.rom)
            if meta.get("mesh_hash") != mesh.content_hash() and not args.force:
                raise UserError("reduced model was built on a different mesh (use --force)")
            if args.n_sigma or args.n_potential:
                rom = rom.truncate(args.n_sigma or None, args.n_potential or None)
            res = map_reduced(rom, rom.sigma_basis.eigenvalues, compose_total_error(noise, error),
                              V, cfg.gn())
        results[method] = res
        stem = _out(args, f"{Path(args.data).stem}_{method}")
        record = {
            "method": method, "iterations": res.iterations, "wall_time": res.wall_time,
            "converged": res.converged, "cost_trace": res.cost_trace.tolist(),
            "estimate": res.estimate.tolist(), "seed": cfg.seed,
            "inputs": {"mesh": mesh.content_hash(), "data": io.file_hash(args.data)},
        }
        if res.coefficients is not None:
            record["coefficients"] = res.coefficients.tolist()
        if args.truth:
            truth = make_phantom(args.truth, radius=mesh.radius, **_params(args.param))
            record["relative_error"] = relative_error(mesh, res.estimate, truth(mesh.vertices))
        img = io.rasterize(mesh, res.estimate, args.image_size)
        io.write_pgm(stem.with_suffix(".pgm"), img, args.vmin, args.vmax)
        io.write_ppm(stem.with_suffix(".ppm"), img, args.vmin, args.vmax)
        if args.uncertainty:
            x0, y0, x1, y1 = args.section
            pts = chord((x0, y0), (x1, y1), 101)
            summ = posterior_summary(res, mesh, pts, require_converged=False)
            lo, hi = summ.band
            io.save_table(stem.with_name(stem.name + "_section.csv"),
                          ["x", "y", "estimate", "std", "lower", "upper"],
                          [[*p, e, s, a, b] for p, e, s, a, b in
                           zip(pts.tolist(), summ.section_estimate, summ.section_std, lo, hi)])
            record["uncertainty"] = "linearized (Laplace) posterior, 2 std band"
        io.dump_json(record, stem.with_suffix(".json"))
        print(f"{method}: {res.iterations} iterations, {res.wall_time * 1e3:.1f} ms"
              + (f", relative error {record['relative_error']:.4f}" if "relative_error" in record else ""))
    if len(results) == 2:
        a, b = results["full"], results["reduced"]
        diff = relative_error(mesh, b.estimate, a.estimate)
        print(f"speedup {a.wall_time / b.wall_time:.1f}x, reduced vs full relative difference {diff:.4f}")
    return 0


def cmd_benchmark(args, cfg: RunConfig) -> int:
    mesh = io.load_mesh(args.mesh)
    fine = io.load_mesh(args.fine_mesh)
    protocol = opposite_injection(mesh.n_electrodes, cfg.amplitude)
    model = CemModel(mesh, cfg.impedance, protocol, floor=cfg.floor())
    prior = build_prior(mesh, cfg.kernel(), cfg.mean)
    ns = [int(x) for x in args.n_sigma_grid.split(",")]
    ms = [int(x) for x in args.n_potential_grid.split(",")]
    build = build_offline(model, prior, cfg.samples, cfg.seed, n_sigma=max(ns), n_potential=max(ms))
    rows = []
    for case in [int(c) for c in args.cases.split(",")]:
        phantom = make_phantom(TEST_CASES[case], radius=fine.radius)
        V, _ = simulate_measurements(fine, phantom, cfg.impedance, protocol, cfg.noise(), cfg.seed + case, mesh)
        noise = measurement_noise(V, cfg.noise())
        truth = phantom(mesh.vertices)
        full_times = []
        for _ in range(args.repeats):
            rf = map_full(model, prior, noise, V, cfg.gn())
            full_times.append(rf.wall_time)
        tf = float(np.median(full_times))
        ef = relative_error(mesh, rf.estimate, truth)
        rows.append([case, "full", mesh.n_linear_nodes, mesh.n_quadratic_nodes, tf, ef, rf.iterations, 1.0])
        for K in ns:
            for m in ms:
                rom, err = truncated(build, K, m)
                total = compose_total_error(noise, err)
                times = []
                for _ in range(args.repeats):
                    rr = map_reduced(rom, rom.sigma_basis.eigenvalues, total, V, cfg.gn())
                    times.append(rr.wall_time)
                tr = float(np.median(times))
                rows.append([case, "reduced", K, m, tr, relative_error(mesh, rr.estimate, truth),
                             rr.iterations, tf / tr])
                print(f"case {case} N^={K:3d} M^={m:3d}: {tr * 1e3:7.1f} ms, error {rows[-1][5]:.4f}, "
                      f"speedup {tf / tr:.0f}x")
    path = _out(args, "benchmark.csv")
    io.save_table(path, ["case", "method", "n_sigma", "n_potential", "wall_time", "relative_error",
                         "iterations", "speedup"], rows)
    print(path)
    return 0


def cmd_rom_describe(args, cfg: RunConfig) -> int:
    rom, error, meta = io.load_rom(args.rom)
    info = {
        "n_sigma": rom.n_sigma, "n_potential": rom.n_potential, "injections": rom.n_injections,
        "electrodes": rom.C.shape[0], "mesh_hash": rom.mesh_hash, "rom_hash": rom.content_hash(),
        "error_model": error.summary(), "provenance": meta,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--cache", default="cache", help="cache directory for reduced models")
    common.add_argument("--force", action="store_true", help="overwrite artifacts built from other inputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="podeit", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh", parents=[common], help="generate and validate a disk mesh")
    s.add_argument("--electrodes", type=int)
    s.add_argument("--width", type=float, help="electrode width (cm)")
    s.add_argument("--diameter", type=float, help="disk diameter (cm)")
    s.add_argument("--elements", type=int)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("simulate", parents=[common], help="synthetic measurements of a phantom")
    s.add_argument("--mesh", required=True, help="fine data-generation mesh JSON")
    s.add_argument("--reconstruction-mesh", help="warn if the data mesh is not finer than this")
    s.add_argument("--phantom", required=True, choices=["smooth-blob", "rectangles", "disk-pair"])
    s.add_argument("--param", action="append", help="phantom parameter key=JSON, repeatable")
    s.add_argument("--zero-noise", action="store_true")
    s.add_argument("--noise-relative", type=float)
    s.add_argument("--noise-range", type=float)
    s.add_argument("--impedance", type=float)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-rom", parents=[common], help="offline ensemble, POD and error model")
    s.add_argument("--mesh", required=True)
    s.add_argument("--samples", type=int)
    s.add_argument("--retain", type=float)
    s.add_argument("--retain-potential", type=float)
    s.add_argument("--n-sigma", type=int)
    s.add_argument("--n-potential", type=int)
    s.add_argument("--correlation-length", type=float)
    s.add_argument("--variance", type=float)
    s.add_argument("--mean", type=float)
    s.add_argument("--impedance", type=float)
    s.add_argument("--fresh-error-samples", action="store_true",
                   help="estimate the reduction error on a new ensemble")
    s.add_argument("--per-injection-bases", action="store_true",
                   help="one potential POD per injection instead of rotating the first")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_build_rom)

    s = sub.add_parser("reconstruct", parents=[common], help="MAP estimate from data")
    s.add_argument("--mesh", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=["full", "reduced", "both"], default="reduced")
    s.add_argument("--rom")
    s.add_argument("--n-sigma", type=int, default=0)
    s.add_argument("--n-potential", type=int, default=0)
    s.add_argument("--truth", choices=["smooth-blob", "rectangles", "disk-pair"],
                   help="report the relative error against this phantom")
    s.add_argument("--param", action="append")
    s.add_argument("--uncertainty", action="store_true", help="write a 2-std cross-section CSV")
    s.add_argument("--section", type=float, nargs=4, default=(-14 / 2**0.5, 14 / 2**0.5, 14 / 2**0.5, -14 / 2**0.5),
                   metavar=("X0", "Y0", "X1", "Y1"))
    s.add_argument("--image-size", type=int, default=256)
    s.add_argument("--vmin", type=float)
    s.add_argument("--vmax", type=float)
    s.add_argument("--impedance", type=float)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("benchmark", parents=[common], help="timing and error over basis sizes")
    s.add_argument("--mesh", required=True)
    s.add_argument("--fine-mesh", required=True)
    s.add_argument("--cases", default="1,2,3")
    s.add_argument("--n-sigma-grid", default="5,15,30,45,54")
    s.add_argument("--n-potential-grid", default="5,10,15,20,25")
    s.add_argument("--samples", type=int)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("rom", parents=[common], help="inspect a reduced model")
    rs = s.add_subparsers(dest="rom_command", required=True)
    d = rs.add_parser("describe", parents=[common])
    d.add_argument("rom")
    d.set_defaults(func=cmd_rom_describe)
    return p


_OVERRIDES = ("electrodes", "width", "diameter", "elements", "samples", "retain", "retain_potential",
              "correlation_length", "variance", "mean", "impedance", "noise_relative", "noise_range",
              "seed")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
        if args.command == "build-rom":
            overrides["n_sigma"] = args.n_sigma
            overrides["n_potential"] = args.n_potential
        cfg = RunConfig.from_sources(args.config, overrides)
        return args.func(args, cfg)
    except PodEitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
