import time
from dataclasses import replace

import numpy as np
import pytest

from podeit.cem import CemModel, opposite_injection, operators
from podeit.errors import DimensionMismatch, ModelMismatch
from podeit.mesh import ElectrodeLayout, generate_disk_mesh
from podeit.pod import PodBasis
from podeit.rom import precompute_reduced, reduced_forward, reduced_jacobian

from conftest import Z


def _orthonormal(n, k, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, k)))
    return q


def test_blocks_symmetric(desk_build):
    B = desk_build.reduced.B_stack
    assert np.array_equal(B, np.swapaxes(B, -1, -2))


def test_projection_identity(desk_mesh, desk_build):
    rom = desk_build.reduced.truncate(5, 5)
    ops = operators(desk_mesh, Z)
    phis = np.column_stack([rom.sigma_basis.mean, rom.sigma_basis.modes])
    for p, pb in enumerate(rom.potential_bases):
        W = np.column_stack([pb.mean, pb.modes])
        for k in range(phis.shape[1]):
            full = W.T @ (ops.stiffness(phis[:, k]) @ W)
            assert np.abs(rom.B_stack[p, k] - full).max() <= 1e-12 * np.abs(full).max()
    # contact blocks in factored form reproduce the projected D and E
    W = np.column_stack([rom.potential_bases[0].mean, rom.potential_bases[0].modes])
    assert np.allclose(rom.D_red[0], W.T @ (ops.D @ W), rtol=1e-12, atol=1e-12 * np.abs(rom.D_red).max())
    assert np.allclose(rom.E_red[0], W.T @ ops.E.toarray(), rtol=1e-12, atol=1e-12 * np.abs(rom.E_red).max())
    assert np.allclose(rom.F, ops.F, rtol=1e-13)


def test_mean_mode_on_full_basis(tiny_mesh):
    ops = operators(tiny_mesh, Z)
    M = tiny_mesh.n_quadratic_nodes
    N = tiny_mesh.n_linear_nodes
    sb = PodBasis(np.zeros((N, 0)), np.ones(N), np.full(N, 3.0))
    pb = PodBasis(np.eye(M), np.ones(M), np.zeros(M), "potential(0)")
    proto = opposite_injection(4)
    rom = precompute_reduced(tiny_mesh, sb, (pb, pb), Z, proto)
    ref = 3.0 * ops.stiffness(np.ones(N)).toarray()
    assert np.allclose(rom.B_stack[0, 0, 1:, 1:], ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_paper_dimensions(mesh_2414):
    N, M = mesh_2414.n_linear_nodes, mesh_2414.n_quadratic_nodes
    sb = PodBasis(_orthonormal(N, 54, 0), np.ones(N), np.full(N, 3.0))
    pb = tuple(PodBasis(_orthonormal(M, 25, p), np.ones(M), np.zeros(M), f"potential({p})") for p in range(8))
    rom = precompute_reduced(mesh_2414, sb, pb, Z, opposite_injection(16))
    assert rom.B_stack.shape == (8, 55, 26, 26)
    assert (rom.n_sigma, rom.n_potential) == (54, 25)


def test_mean_field(desk_model, desk_prior, desk_build):
    rom, err = desk_build.reduced, desk_build.error
    d = desk_model.forward(desk_prior.mean) - rom.forward(np.zeros(rom.n_sigma))
    std = np.sqrt(np.diag(err.cov))
    assert np.all(np.abs(d - err.mean) <= 3 * std + 1e-12)


def test_projected_sample(desk_model, desk_prior, desk_build):
    rom, err = desk_build.reduced, desk_build.error
    std = np.sqrt(np.diag(err.cov))
    hits = []
    for s in desk_prior.sample(20, 99):
        d = desk_model.forward(s) - reduced_forward(rom, rom.sigma_basis.project(s), desk_model.protocol)
        hits.append(np.abs(d - err.mean) <= 3 * std)
    hits = np.array(hits)
    # Gaussian 3-std coverage is 99.7%; allow heavier tails of the error
    assert hits.mean() >= 0.97


def test_exact_subspace(tiny_model, tiny_full_build):
    rom = tiny_full_build.reduced
    assert rom.n_sigma == tiny_model.mesh.n_linear_nodes
    assert rom.n_potential == tiny_model.mesh.n_quadratic_nodes
    S = tiny_full_build.ensemble.samples[:10]
    for s in S:
        V = tiny_model.forward(s)
        Vr = rom.forward(rom.sigma_basis.project(s))
        assert np.abs(V - Vr).max() <= 1e-8 * np.abs(V).max()


def _fd_columns(rom, alpha, eps):
    cols = []
    for k in range(rom.n_sigma):
        e = np.zeros(rom.n_sigma)
        e[k] = eps
        cols.append((rom.forward(alpha + e) - rom.forward(alpha - e)) / (2 * eps))
    return np.column_stack(cols)


def test_reduced_jacobian_fd(desk_build):
    rom = desk_build.reduced
    alpha = np.zeros(rom.n_sigma)
    J = reduced_jacobian(rom, alpha)
    fd = _fd_columns(rom, alpha, 1e-4)
    col = np.abs(J - fd).max(axis=0) / np.abs(fd).max(axis=0)
    assert col.max() <= 1e-6


def test_reduced_jacobian_directional(desk_build):
    rom = desk_build.reduced
    alpha = np.random.default_rng(4).standard_normal(rom.n_sigma) * np.sqrt(rom.sigma_basis.eigenvalues[: rom.n_sigma])
    V, J = rom.jacobian(alpha)
    assert np.array_equal(V, rom.forward(alpha))
    eps = 1e-6
    for k in (0, 5, rom.n_sigma - 1):
        e = np.zeros(rom.n_sigma)
        e[k] = eps
        fd = (rom.forward(alpha + e) - V) / eps
        assert np.abs(J[:, k] - fd).max() <= 1e-4 * np.abs(J[:, k]).max()


def test_chain_rule(tiny_model, tiny_full_build):
    rom = tiny_full_build.reduced
    s = tiny_full_build.ensemble.samples[0]
    a = rom.sigma_basis.project(s)
    _, Jf = tiny_model.jacobian(rom.nodal(a))
    Jr = rom.jacobian(a)[1]
    ref = Jf @ rom.sigma_basis.modes
    assert np.abs(Jr - ref).max() <= 1e-6 * np.abs(ref).max()


def test_affinity(desk_build):
    rom = desk_build.reduced
    alpha = np.random.default_rng(5).standard_normal(rom.n_sigma) * 0.1
    k, delta = 3, 0.2
    e = np.zeros(rom.n_sigma)
    e[k] = delta
    B = rom.B_stack.copy()
    B[:, 0] += delta * B[:, k + 1]
    shifted = replace(rom, B_stack=B)
    assert np.allclose(rom.forward(alpha + e), shifted.forward(alpha), rtol=1e-12, atol=1e-12)


def test_batched_forward(desk_build):
    rom = desk_build.reduced
    A = np.random.default_rng(6).standard_normal((7, rom.n_sigma)) * 0.2
    batch = rom.forward(A)
    single = np.array([rom.forward(a) for a in A])
    assert np.allclose(batch, single, rtol=1e-11, atol=1e-11 * np.abs(single).max())


def test_error_decays_with_basis_size(tiny_model, tiny_prior, tiny_full_build):
    rom = tiny_full_build.reduced
    S = tiny_prior.sample(200, 17)
    V = np.array([tiny_model.forward(s) for s in S])
    a = rom.sigma_basis.project(S)

    def mse(K, m):
        r = rom.truncate(K, m)
        return np.mean((V - r.forward(a[:, :K])) ** 2)

    N, M = rom.n_sigma, rom.n_potential
    by_n = [mse(K, M) for K in (2, 5, 10, 20, 40, N)]
    by_m = [mse(N, m) for m in (2, 5, 10, 20, 40, 80, M)]
    assert all(b <= a for a, b in zip(by_n, by_n[1:]))
    assert all(b <= a for a, b in zip(by_m, by_m[1:]))


def test_truncate_checks(desk_build):
    with pytest.raises(DimensionMismatch):
        desk_build.reduced.truncate(10_000, 1)
    with pytest.raises(DimensionMismatch):
        desk_build.reduced.forward(np.zeros(3))


def test_protocol_mismatch(desk_build):
    with pytest.raises(ModelMismatch):
        reduced_forward(desk_build.reduced, np.zeros(desk_build.reduced.n_sigma), opposite_injection(8, 2.0))


def test_basis_mesh_mismatch(desk_mesh, desk_build, tiny_mesh):
    with pytest.raises(ModelMismatch):
        precompute_reduced(tiny_mesh, desk_build.sigma_basis, desk_build.potential_bases, Z, opposite_injection(4))


@pytest.mark.slow
def test_online_cost_independent_of_mesh():
    roms = []
    for target in (600, 2414, 8394):
        mesh = generate_disk_mesh(ElectrodeLayout(16, 2.5, 14.0), target)
        N, M = mesh.n_linear_nodes, mesh.n_quadratic_nodes
        model = CemModel(mesh, Z, opposite_injection(16))
        _, beta = model.forward_with_potentials(np.full(N, 3.0))
        sb = PodBasis(_orthonormal(N, 54, 0) * 0.05, np.ones(N), np.full(N, 3.0))
        pb = tuple(PodBasis(_orthonormal(M, 25, p), np.ones(M), beta[:, p], f"potential({p})") for p in range(8))
        roms.append(precompute_reduced(mesh, sb, pb, Z, model.protocol).prepare())
    alpha = np.random.default_rng(0).standard_normal(54)
    runs = [[] for _ in roms]
    # interleave the models so machine drift affects all of them alike
    for _ in range(300):
        for rom, r in zip(roms, runs):
            t0 = time.perf_counter()
            rom.forward(alpha)
            r.append(time.perf_counter() - t0)
    times = np.median(runs, axis=1)
    assert times.max() <= 1.2 * times.min(), times
