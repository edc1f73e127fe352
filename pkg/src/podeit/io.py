"""Artifact formats: mesh JSON, measurement CSV, versioned npz caches,
key=value configs and PGM/PPM rasters."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .cem import StimulationProtocol
from .errors import CacheConflict, MissingArtifact, UserError
from .mesh import ElectrodeLayout, Mesh2D, mesh_from_arrays

CACHE_VERSION = 1
MESH_SCHEMA = "podeit.mesh/1"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{path} does not exist")
    return json.loads(path.read_text())


# mesh ----------------------------------------------------------------

def mesh_to_dict(mesh: Mesh2D) -> dict:
    pairs = [[[int(a), int(b)] for a, b in mesh.edges[np.asarray(g, dtype=int)]]
             for g in mesh.electrode_edges]
    lay = mesh.layout
    return {
        "schema": MESH_SCHEMA,
        "radius": mesh.radius,
        "layout": None if lay is None else {
            "count": lay.count, "width": lay.width, "radius": lay.radius,
            "angular_offset": lay.angular_offset,
        },
        "n_elements": mesh.n_elements,
        "n_linear_nodes": mesh.n_linear_nodes,
        "n_quadratic_nodes": mesh.n_quadratic_nodes,
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "electrode_edges": pairs,
        "hash": mesh.content_hash(),
    }


def mesh_from_dict(d: dict) -> Mesh2D:
    if d.get("schema") != MESH_SCHEMA:
        raise UserError(f"unsupported mesh schema {d.get('schema')!r}")
    lay = ElectrodeLayout(**d["layout"]) if d.get("layout") else None
    mesh = mesh_from_arrays(
        np.asarray(d["vertices"], dtype=float), np.asarray(d["triangles"], dtype=np.int64),
        [[tuple(p) for p in g] for g in d["electrode_edges"]], radius=d.get("radius"), layout=lay,
    )
    if "hash" in d and d["hash"] != mesh.content_hash():
        raise UserError("mesh file was edited: stored hash does not match its contents")
    return mesh


def save_mesh(mesh: Mesh2D, path) -> None:
    dump_json(mesh_to_dict(mesh), path)


def load_mesh(path) -> Mesh2D:
    return mesh_from_dict(load_json(path))


# measurements ----------------------------------------------------------

def measurement_pairs(protocol: StimulationProtocol):
    """(positive, negative) electrode of each measurement row, or -1."""
    out = []
    for row in protocol.measurement:
        pos = np.flatnonzero(row > 0)
        neg = np.flatnonzero(row < 0)
        out.append((int(pos[0]) if len(pos) == 1 else -1, int(neg[0]) if len(neg) == 1 else -1))
    return out


def save_measurements(path, V, protocol: StimulationProtocol, noise=None) -> None:
    pairs = measurement_pairs(protocol)
    rows = len(pairs)
    inj = protocol.injection_pairs()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["injection", "source", "sink", "electrode_pos", "electrode_neg", "value"]
        if noise is not None:
            header.append("noise")
        w.writerow(header)
        for i, v in enumerate(V):
            p, r = divmod(i, rows)
            line = [p, inj[p][0], inj[p][1], pairs[r][0], pairs[r][1], repr(float(v))]
            if noise is not None:
                line.append(repr(float(noise[i])))
            w.writerow(line)


def load_measurements(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{path} does not exist")
    with open(path, newline="") as fh:
        return np.array([float(row["value"]) for row in csv.DictReader(fh)])


def save_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# binary cache ----------------------------------------------------------

def save_cache(path, arrays: dict, meta: dict) -> None:
    meta = dict(meta, cache_version=CACHE_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_cache(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{path} does not exist")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("cache_version") != CACHE_VERSION:
            raise CacheConflict(
                f"{path} has cache version {meta.get('cache_version')}, expected {CACHE_VERSION}"
            )
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta


def check_inputs(meta: dict, expected: dict, path, force: bool = False) -> None:
    """Refuse artifacts whose recorded input hashes differ from ``expected``."""
    stale = {k: (meta.get("inputs", {}).get(k), v) for k, v in expected.items()
             if meta.get("inputs", {}).get(k) != v}
    if stale and not force:
        detail = ", ".join(f"{k}: {a} != {b}" for k, (a, b) in stale.items())
        raise CacheConflict(f"{path} was built from different inputs ({detail}); use --force")


# config ----------------------------------------------------------------

def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"config {path} does not exist")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in sorted(values.items())))


# rasters ----------------------------------------------------------------

# blue -> white -> red, linear between the stops
COLORMAP = np.array([
    [0.0, 0, 0, 128],
    [0.25, 0, 96, 255],
    [0.5, 255, 255, 255],
    [0.75, 255, 96, 0],
    [1.0, 128, 0, 0],
])


def rasterize(mesh: Mesh2D, nodal, size: int = 256, background=np.nan) -> np.ndarray:
    """Flat-shaded image of a nodal field: each pixel takes the element
    mean of the triangle containing its centre."""
    nodal = np.asarray(nodal, dtype=float)
    R = mesh.radius or np.abs(mesh.vertices).max()
    c = (np.arange(size) + 0.5) / size * 2 * R - R
    X, Y = np.meshgrid(c, c[::-1])
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = np.hypot(pts[:, 0], pts[:, 1]) <= R
    img = np.full(size * size, background, dtype=float)
    tri, _ = mesh.locate(pts[inside], extrapolate=True)
    img[inside] = nodal[mesh.triangles[tri]].mean(axis=1)
    return img.reshape(size, size)


def _normalize(img, vmin, vmax):
    vmin = np.nanmin(img) if vmin is None else vmin
    vmax = np.nanmax(img) if vmax is None else vmax
    span = vmax - vmin if vmax > vmin else 1.0
    return np.clip((img - vmin) / span, 0, 1)


def write_pgm(path, img, vmin=None, vmax=None) -> None:
    t = _normalize(img, vmin, vmax)
    g = np.where(np.isnan(img), 255, np.round(t * 255)).astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(g.tobytes())


def write_ppm(path, img, vmin=None, vmax=None) -> None:
    t = _normalize(img, vmin, vmax)
    rgb = np.stack([np.interp(t, COLORMAP[:, 0], COLORMAP[:, i]) for i in (1, 2, 3)], axis=-1)
    rgb[np.isnan(img)] = 255
    rgb = np.round(rgb).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


# reduced model ------------------------------------------------------------

def save_rom(path, reduced, error, meta: dict) -> None:
    pb = reduced.potential_bases
    arrays = {
        "B_stack": reduced.B_stack, "G_stack": reduced.G_stack, "H": reduced.H, "C": reduced.C,
        "z": reduced.z, "currents": reduced.protocol.currents,
        "measurement": reduced.protocol.measurement,
        "sigma_modes": reduced.sigma_basis.modes, "sigma_eigenvalues": reduced.sigma_basis.eigenvalues,
        "sigma_mean": reduced.sigma_basis.mean,
        "potential_modes": np.stack([b.modes for b in pb]),
        "potential_means": np.stack([b.mean for b in pb]),
        "potential_eigenvalues": pb[0].eigenvalues,
        "error_mean": error.mean, "error_cov": error.cov,
    }
    meta = dict(meta, mesh_hash=reduced.mesh_hash, rom_hash=reduced.content_hash(),
                n_sigma=reduced.n_sigma, n_potential=reduced.n_potential)
    save_cache(path, arrays, meta)


def load_rom(path):
    from .approx_error import NoiseModel
    from .pod import PodBasis
    from .rom import ReducedModel

    a, meta = load_cache(path)
    protocol = StimulationProtocol(a["currents"], a["measurement"])
    sb = PodBasis(a["sigma_modes"], a["sigma_eigenvalues"], a["sigma_mean"], "conductivity")
    pb = tuple(PodBasis(M, a["potential_eigenvalues"], u0, f"potential({p})")
               for p, (M, u0) in enumerate(zip(a["potential_modes"], a["potential_means"])))
    rom = ReducedModel(sb, pb, a["B_stack"], a["G_stack"], a["H"], a["C"], protocol,
                       meta.get("mesh_hash", ""), a["z"])
    return rom, NoiseModel(a["error_mean"], a["error_cov"]), meta
