import itertools

import numpy as np
import pytest

from podeit.approx_error import compose_total_error, measurement_noise, zero_error
from podeit.cem import CemModel, NoiseSpec, StimulationProtocol, adjacent_measurement, opposite_injection
from podeit.errors import DimensionMismatch, NotConverged, UserError
from podeit.inversion import (
    GnConfig,
    MapResult,
    chord,
    map_full,
    map_reduced,
    nodal_values,
    posterior_summary,
)
from podeit.mesh import ElectrodeLayout, generate_disk_mesh, mesh_from_arrays
from podeit.offline import build_offline
from podeit.phantoms import make_phantom
from podeit.prior import build_prior, pr1

from conftest import Z, rotate_data, symmetric_mesh


def _triangle():
    """A single element with one electrode on each side."""
    mesh = mesh_from_arrays([[0, 0], [4, 0], [0, 3.0]], [[0, 1, 2]], [[(0, 1)], [(1, 2)], [(2, 0)]])
    proto = StimulationProtocol(np.array([[1, 0], [-1, 1], [0, -1.0]]), adjacent_measurement(3))
    return mesh, CemModel(mesh, Z, proto), build_prior(mesh, pr1())


@pytest.fixture(scope="module")
def triangle_problem():
    mesh, model, prior = _triangle()
    V = model.forward(np.array([2.6, 3.5, 3.1]))
    noise = measurement_noise(V, NoiseSpec())
    data = V + np.random.default_rng(0).standard_normal(len(V)) * np.sqrt(np.diag(noise.cov))
    return model, prior, noise, data


def _cost(prior, noise, data, x, V):
    return np.sum((prior.chol_prec @ (x - prior.mean)) ** 2) + np.sum((noise.chol_prec @ (data - V)) ** 2)


@pytest.fixture(scope="module")
def desk_case(desk_model):
    """Resistive blob data from a finer mesh of the same disk."""
    fine = generate_disk_mesh(ElectrodeLayout(8, 2.5, 14.0), 1200)
    truth = make_phantom("smooth-blob", center=(-4.0, 3.0), width=3.0)
    V = CemModel(fine, Z, desk_model.protocol).forward(truth(fine.vertices))
    noise = measurement_noise(V, NoiseSpec())
    data = V + np.random.default_rng(1).standard_normal(len(V)) * np.sqrt(np.diag(noise.cov))
    return data, noise, truth


def test_noiseless_prior_mean_full(desk_model, desk_prior):
    V = desk_model.forward(desk_prior.mean)
    r = map_full(desk_model, desk_prior, measurement_noise(V, NoiseSpec()), V)
    assert r.converged and r.iterations <= 2
    assert np.allclose(r.estimate, desk_prior.mean, rtol=1e-10, atol=0)


def test_noiseless_prior_mean_reduced(desk_model, desk_prior, desk_build):
    V = desk_model.forward(desk_prior.mean)
    total = compose_total_error(measurement_noise(V, NoiseSpec()), desk_build.error)
    r = map_reduced(desk_build.reduced, desk_build.sigma_basis.eigenvalues, total, V)
    assert r.converged
    # coefficients vanish up to the posterior spread left by the total error
    H = r.context["jw"].T @ r.context["jw"] + r.context["prior_precision"]
    std = np.sqrt(np.diag(np.linalg.inv(H)))
    assert np.all(np.abs(r.coefficients) <= 3 * std)


def test_exact_reduced_data_gives_zero(desk_build):
    rom = desk_build.reduced
    V = rom.forward(np.zeros(rom.n_sigma)) + desk_build.error.mean
    total = compose_total_error(measurement_noise(V, NoiseSpec()), desk_build.error)
    r = map_reduced(rom, desk_build.sigma_basis.eigenvalues, total, V)
    assert r.iterations == 0 and not np.any(r.coefficients)


def test_triangle_matches_grid_search(triangle_problem):
    model, prior, noise, data = triangle_problem
    r = map_full(model, prior, noise, data, GnConfig(relative_cost_tolerance=1e-12))
    assert r.converged

    def best(axes):
        pts = np.array(list(itertools.product(*axes)))
        costs = [_cost(prior, noise, data, x, model.forward(x)) for x in pts]
        i = int(np.argmin(costs))
        return pts[i], costs[i]

    coarse, _ = best([np.arange(1.5, 4.5001, 0.1)] * 3)
    fine, c_grid = best([c + np.arange(-0.1, 0.1001, 0.01) for c in coarse])
    assert np.abs(r.estimate - fine).max() <= 0.01
    assert _cost(prior, noise, data, r.estimate, model.forward(r.estimate)) <= c_grid


def test_one_dimensional_surrogate(triangle_problem):
    model, prior, noise, data = triangle_problem
    b = build_offline(model, prior, 40, 2, n_sigma=1, retain_potential=1.0, rotate=False)
    rom, lam = b.reduced, b.sigma_basis.eigenvalues[0]
    total = compose_total_error(noise, zero_error(noise.dim))
    r = map_reduced(rom, b.sigma_basis.eigenvalues, total, data, GnConfig(relative_cost_tolerance=1e-12))
    grid = np.linspace(-6, 6, 24_001) * np.sqrt(lam)
    V = rom.forward(grid[:, None])
    costs = grid**2 / lam + np.sum(((data - V) @ total.chol_prec.T) ** 2, axis=1)
    step = grid[1] - grid[0]
    assert abs(r.coefficients[0] - grid[np.argmin(costs)]) <= step


def test_posterior_matches_dense_inverse(triangle_problem):
    model, prior, noise, data = triangle_problem
    r = map_full(model, prior, noise, data, GnConfig(relative_cost_tolerance=1e-12))
    _, J = model.jacobian(r.estimate)
    H = J.T @ np.linalg.inv(noise.regularized_cov) @ J + np.linalg.inv(prior.cov)
    var = np.diag(np.linalg.inv(H))
    s = posterior_summary(r)
    assert np.abs(s.pointwise_std**2 - var).max() <= 1e-10 * var.max()


def test_no_data_gives_prior_std(desk_prior, desk_mesh):
    n = desk_prior.dim
    r = MapResult(desk_prior.mean, None, np.array([0.0]), 0, 0.0, True, "full",
                  {"jw": np.zeros((5, n)), "prior_precision": desk_prior.precision(), "mesh": desk_mesh})
    s = posterior_summary(r)
    assert np.allclose(s.pointwise_std, desk_prior.std, rtol=1e-8)
    assert np.allclose(s.pointwise_std, 0.5, rtol=1e-4)


def test_full_reconstruction(desk_model, desk_mesh, desk_prior, desk_case):
    data, noise, truth = desk_case
    r = map_full(desk_model, desk_prior, noise, data)
    assert r.converged and r.iterations >= 1
    assert np.all(np.diff(r.cost_trace) < 0)
    # the blob is resistive: its centre ends up well below the background
    at_blob = nodal_values(desk_mesh, r.estimate, np.array([[-4.0, 3.0]]))[0]
    far = nodal_values(desk_mesh, r.estimate, np.array([[6.0, -6.0]]))[0]
    assert at_blob < far - 0.3
    s = posterior_summary(r, section=chord((-10, -10), (10, 10), 41))
    assert np.all(s.pointwise_std >= 0) and np.all(s.pointwise_std <= desk_prior.std + 1e-12)
    lo, hi = s.band
    assert np.all(lo <= s.section_estimate) and np.all(s.section_estimate <= hi)


def test_reduced_reconstruction(desk_build, desk_case, desk_mesh):
    data, noise, _ = desk_case
    total = compose_total_error(noise, desk_build.error)
    r = map_reduced(desk_build.reduced, desk_build.sigma_basis.eigenvalues, total, data)
    assert r.converged
    assert np.all(np.diff(r.cost_trace) < 0)
    assert np.allclose(r.estimate, desk_build.reduced.nodal(r.coefficients))
    s = posterior_summary(r, desk_mesh, chord((-10, -10), (10, 10), 21))
    assert np.all(s.pointwise_std >= 0) and len(s.section_std) == 21


def test_rotation_equivariance():
    mesh, perm = symmetric_mesh()
    model = CemModel(mesh, Z, opposite_injection(8))
    prior = build_prior(mesh, pr1())
    truth = 3.0 - 1.2 * np.exp(-np.sum((mesh.vertices - [5.0, 2.0]) ** 2, axis=1) / 8)
    rot = np.empty_like(truth)
    rot[perm] = truth
    V = model.forward(truth)
    e = np.random.default_rng(3).standard_normal(len(V)) * 0.01 * np.abs(V)
    data = V + e
    data_rot = rotate_data(data, 8)
    cfg = GnConfig(relative_cost_tolerance=1e-12)
    a = map_full(model, prior, measurement_noise(V, NoiseSpec()), data, cfg)
    b = map_full(model, prior, measurement_noise(rotate_data(V, 8), NoiseSpec()), data_rot, cfg)
    moved = np.empty_like(a.estimate)
    moved[perm] = a.estimate
    assert np.abs(b.estimate - moved).max() <= 1e-6 * np.abs(a.estimate).max()


def test_reduced_with_complete_bases_matches_full(tiny_model, tiny_prior, tiny_full_build):
    truth = 3.0 + 0.8 * np.sin(tiny_model.mesh.vertices[:, 0] / 4)
    V = tiny_model.forward(truth)
    noise = measurement_noise(V, NoiseSpec())
    data = V + np.random.default_rng(2).standard_normal(len(V)) * np.sqrt(np.diag(noise.cov))
    cfg = GnConfig(relative_cost_tolerance=1e-12)
    full = map_full(tiny_model, tiny_prior, noise, data, cfg)
    total = compose_total_error(noise, zero_error(noise.dim))
    red = map_reduced(tiny_full_build.reduced, tiny_full_build.sigma_basis.eigenvalues, total, data, cfg)
    assert full.converged and red.converged
    rel = np.linalg.norm(red.estimate - full.estimate) / np.linalg.norm(full.estimate)
    assert rel <= 1e-4


def test_not_converged(desk_model, desk_prior, desk_case):
    data, noise, _ = desk_case
    r = map_full(desk_model, desk_prior, noise, data, GnConfig(max_iterations=1, relative_cost_tolerance=1e-15))
    assert not r.converged and r.iterations == 1
    with pytest.raises(NotConverged):
        posterior_summary(r)
    assert posterior_summary(r, require_converged=False).pointwise_std.shape == (desk_prior.dim,)


def test_input_checks(desk_model, desk_prior, desk_build):
    with pytest.raises(DimensionMismatch):
        map_full(desk_model, desk_prior, zero_error(3), np.zeros(3))
    with pytest.raises(DimensionMismatch):
        map_reduced(desk_build.reduced, np.ones(2), zero_error(32), np.zeros(32))
    with pytest.raises(UserError):
        GnConfig(backtrack_factor=1.0)
    with pytest.raises(UserError):
        GnConfig(relative_cost_tolerance=0.0)
    r = MapResult(np.zeros(3), None, np.zeros(1), 0, 0.0, True, "full",
                  {"jw": np.zeros((1, 3)), "prior_precision": np.eye(3)})
    with pytest.raises(UserError):
        posterior_summary(r, section=np.zeros((2, 2)))


def _meshes():
    return [generate_disk_mesh(ElectrodeLayout(16, 2.5, 14.0), n) for n in (600, 2414, 8394)]


@pytest.mark.slow
def test_timing_scaling(mesh_8394):
    phantom = make_phantom("smooth-blob")
    proto = opposite_injection(16)
    V = CemModel(mesh_8394, Z, proto).forward(phantom(mesh_8394.vertices))
    noise = measurement_noise(V, NoiseSpec())
    fixed = GnConfig(max_iterations=3, relative_cost_tolerance=1e-15)
    problems, full_times, sizes = [], [], []
    for mesh in _meshes()[:2] + [mesh_8394]:
        model = CemModel(mesh, Z, proto)
        prior = build_prior(mesh, pr1())
        b = build_offline(model, prior, 60, 0, n_sigma=54, n_potential=25)
        problems.append((b.reduced, b.sigma_basis.eigenvalues, compose_total_error(noise, b.error)))
        sizes.append(mesh.n_elements)
        f = map_full(model, prior, noise, V, GnConfig(max_iterations=2, relative_cost_tolerance=1e-15))
        full_times.append(f.wall_time / max(f.iterations, 1))
        del prior, b
    runs = [[] for _ in problems]
    # interleaved so that machine drift hits every mesh alike
    for _ in range(15):
        for (rom, lam, total), r in zip(problems, runs):
            res = map_reduced(rom, lam, total, V, fixed)
            assert res.iterations == 3
            r.append(res.wall_time)
    t = np.median(runs, axis=1)
    assert t.max() <= 1.3 * t.min(), t
    # full cost per iteration grows faster than the element count
    assert full_times[1] / full_times[0] > sizes[1] / sizes[0], full_times
    assert full_times[2] / full_times[1] > sizes[2] / sizes[1], full_times
