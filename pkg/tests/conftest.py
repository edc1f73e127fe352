import numpy as np
import pytest
from scipy.spatial import Delaunay, cKDTree

from podeit.cem import CemModel, opposite_injection
from podeit.mesh import ElectrodeLayout, _orient, generate_disk_mesh, mesh_from_arrays
from podeit.prior import SmoothnessKernel, build_prior

Z = 0.01


def octagon_mesh(radius=14.0):
    """Eight triangles fanned around the centre, electrodes on two opposite edges."""
    t = 2 * np.pi * np.arange(8) / 8
    pts = np.vstack([[0.0, 0.0], radius * np.column_stack([np.cos(t), np.sin(t)])])
    tri = np.array([[0, 1 + k, 1 + (k + 1) % 8] for k in range(8)])
    return mesh_from_arrays(pts, tri, [[(1, 2)], [(5, 6)]], radius=radius)


def symmetric_mesh(L=8, width=2.5, R=14.0, rings=(0.3, 0.55, 0.78), per_ring=(1, 2, 3)):
    """Disk mesh mapped onto itself by a rotation of one electrode pitch.

    Returns (mesh, perm) with R_pitch @ vertices[i] == vertices[perm[i]].
    """
    lay = ElectrodeLayout(L, width, R)
    h, pitch = lay.half_angle, lay.pitch
    g = pitch - 2 * h
    sector = [(R, a) for a in (-h, 0.0, h, h + g / 3, h + 2 * g / 3)]
    for k, (f, m) in enumerate(zip(rings, per_ring)):
        sector += [(f * R, pitch * (j + 0.5 + 0.17 * k) / m) for j in range(m)]
    pts = [np.zeros(2)]
    for l in range(L):
        for r, a in sector:
            pts.append([r * np.cos(a + l * pitch), r * np.sin(a + l * pitch)])
    pts = np.array(pts)
    tri = _orient(pts, Delaunay(pts).simplices)
    ns = len(sector)
    pairs = [[(1 + l * ns, 2 + l * ns), (2 + l * ns, 3 + l * ns)] for l in range(L)]
    mesh = mesh_from_arrays(pts, tri, pairs, radius=R, layout=lay)
    c, s = np.cos(pitch), np.sin(pitch)
    d, perm = cKDTree(pts).query(pts @ np.array([[c, -s], [s, c]]).T)
    assert d.max() < 1e-9
    return mesh, perm


def rotate_data(V, L):
    """Voltages after rotating the conductivity by one electrode pitch."""
    P = L // 2
    V = V.reshape(P, L)
    out = np.empty_like(V)
    for p in range(P):
        q = p + 1
        sign = 1.0
        if q == P:
            q, sign = 0, -1.0
        out[q] = sign * np.roll(V[p], 1)
    return out.ravel()


@pytest.fixture(scope="session")
def desk_mesh():
    """Eight electrodes, under 200 elements."""
    return generate_disk_mesh(ElectrodeLayout(8, 2.5, 14.0), 180)


@pytest.fixture(scope="session")
def desk_model(desk_mesh):
    return CemModel(desk_mesh, Z, opposite_injection(8))


@pytest.fixture(scope="session")
def desk_prior(desk_mesh):
    return build_prior(desk_mesh, SmoothnessKernel(0.25, 4.0), 3.0)


@pytest.fixture(scope="session")
def mesh_2414():
    return generate_disk_mesh(ElectrodeLayout(16, 2.5, 14.0), 2414)


@pytest.fixture(scope="session")
def mesh_8394():
    return generate_disk_mesh(ElectrodeLayout(16, 2.5, 14.0), 8394)


def random_field(mesh, seed, lo=1.0, hi=5.0):
    return np.random.default_rng(seed).uniform(lo, hi, mesh.n_linear_nodes)


@pytest.fixture(scope="session")
def desk_build(desk_model, desk_prior):
    from podeit.offline import build_offline

    return build_offline(desk_model, desk_prior, 400, 3)


@pytest.fixture(scope="session")
def tiny_mesh():
    """Four electrodes, 80 elements: small enough for complete bases."""
    return generate_disk_mesh(ElectrodeLayout(4, 2.5, 14.0), 80)


@pytest.fixture(scope="session")
def tiny_model(tiny_mesh):
    return CemModel(tiny_mesh, Z, opposite_injection(4))


@pytest.fixture(scope="session")
def tiny_prior(tiny_mesh):
    return build_prior(tiny_mesh, SmoothnessKernel(0.25, 4.0), 3.0)


@pytest.fixture(scope="session")
def tiny_full_build(tiny_model, tiny_prior):
    """Complete bases: every conductivity and potential direction kept."""
    from podeit.offline import build_offline

    return build_offline(tiny_model, tiny_prior, 200, 3, 1.0, 1.0, rotate=False)


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
