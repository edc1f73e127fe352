"""Finite element model of the complete electrode model (CEM).

Unknowns are ``theta = [beta, gamma]``: quadratic nodal potentials followed
by the ``L - 1`` electrode coefficients with ``U = C gamma``.

Units: conductivity in uS/cm, contact impedance in Ohm*cm^2, lengths in cm,
currents in mA. Assembly converts to S/cm and A so voltages come out in V.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from podeit.errors import (
    DimensionMismatch,
    NonpositiveConductivity,
    NonpositiveImpedance,
    SingularSystem,
)
from podeit.mesh import Mesh2D

SIGMA_TO_SI = 1e-6  # uS/cm -> S/cm
CURRENT_TO_SI = 1e-3  # mA -> A
FLOOR_FRACTION = 1e-3

# degree-5 symmetric 7-point rule, barycentric points
_a, _b = (6 - np.sqrt(15)) / 21, (6 + np.sqrt(15)) / 21
TRI_POINTS = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_a, _a, 1 - 2 * _a],
        [_a, 1 - 2 * _a, _a],
        [1 - 2 * _a, _a, _a],
        [_b, _b, 1 - 2 * _b],
        [_b, 1 - 2 * _b, _b],
        [1 - 2 * _b, _b, _b],
    ]
)
TRI_WEIGHTS = np.array(
    [9 / 40] + [(155 - np.sqrt(15)) / 1200] * 3 + [(155 + np.sqrt(15)) / 1200] * 3
)
_gl_x, _gl_w = np.polynomial.legendre.leggauss(4)
EDGE_POINTS = 0.5 * (_gl_x + 1)
EDGE_WEIGHTS = 0.5 * _gl_w


def p2_edge_shapes(t: np.ndarray) -> np.ndarray:
    """1D quadratic traces on an edge, columns ordered (start, midpoint, end)."""
    return np.column_stack([(1 - t) * (1 - 2 * t), 4 * t * (1 - t), t * (2 * t - 1)])


def barycentric_gradients(mesh: Mesh2D) -> np.ndarray:
    """(n_elements, 3, 2) constant gradients of the linear hat functions."""
    p = mesh.vertices[mesh.triangles]
    twice_area = 2 * mesh.areas
    grads = np.empty((mesh.n_elements, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / twice_area
        grads[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / twice_area
    return grads


def p2_gradients(lam: np.ndarray, grad_lam: np.ndarray) -> np.ndarray:
    """Gradients of the six quadratic shape functions at barycentric points.

    lam: (Q, 3); grad_lam: (E, 3, 2) -> (E, Q, 6, 2).
    """
    E, Q = grad_lam.shape[0], lam.shape[0]
    out = np.empty((E, Q, 6, 2))
    for i in range(3):
        out[:, :, i] = (4 * lam[:, i] - 1)[None, :, None] * grad_lam[:, None, i]
    for m, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        out[:, :, 3 + m] = 4 * (
            lam[None, :, j, None] * grad_lam[:, None, i] + lam[None, :, i, None] * grad_lam[:, None, j]
        )
    return out


def local_stiffness(mesh: Mesh2D) -> np.ndarray:
    """(n_elements, 3, 6, 6): integral of phi_a grad psi_i . grad psi_j."""
    g = p2_gradients(TRI_POINTS, barycentric_gradients(mesh))
    dots = np.einsum("eqid,eqjd->eqij", g, g)
    w = TRI_WEIGHTS[None, :] * mesh.areas[:, None]
    return np.einsum("eq,qa,eqij->eaij", w, TRI_POINTS, dots)


def reference_matrix(L: int) -> np.ndarray:
    """C = [n_1, ..., n_{L-1}] with n_k = e_1 - e_{k+1}."""
    C = np.zeros((L, L - 1))
    C[0, :] = 1.0
    C[np.arange(1, L), np.arange(L - 1)] = -1.0
    return C


@dataclass(frozen=True)
class StimulationProtocol:
    """Current patterns (L x N_inj, mA) and measurement pattern (rows x L)."""

    currents: np.ndarray
    measurement: np.ndarray

    def __post_init__(self):
        I = np.asarray(self.currents, dtype=float)
        M = np.asarray(self.measurement, dtype=float)
        if I.ndim != 2 or M.ndim != 2 or M.shape[1] != I.shape[0]:
            raise DimensionMismatch("currents must be L x N_inj and measurement rows x L")
        if np.any(np.abs(I.sum(axis=0)) > 1e-12 * max(1.0, np.abs(I).max())):
            raise DimensionMismatch("current patterns must sum to zero")
        if np.any(np.abs(M.sum(axis=1)) > 1e-12):
            raise DimensionMismatch("measurement rows must sum to zero")
        object.__setattr__(self, "currents", I)
        object.__setattr__(self, "measurement", M)

    @property
    def n_electrodes(self) -> int:
        return self.currents.shape[0]

    @property
    def n_injections(self) -> int:
        return self.currents.shape[1]

    @property
    def n_measurements(self) -> int:
        return self.measurement.shape[0] * self.n_injections

    def electrode_pairs(self) -> list[tuple[int, int]]:
        """(positive, negative) electrode per measurement row."""
        return [(int(np.argmax(r)), int(np.argmin(r))) for r in self.measurement]

    def injection_pairs(self) -> list[tuple[int, int]]:
        """(source, sink) electrode per current pattern."""
        return [(int(np.argmax(c)), int(np.argmin(c))) for c in self.currents.T]

    def is_rotation_invariant(self) -> bool:
        """True if rotating by one electrode pitch maps patterns onto patterns
        and the measurement set onto itself."""
        I, M = self.currents, self.measurement
        for p in range(1, self.n_injections):
            if not np.allclose(np.roll(I[:, 0], p), I[:, p]):
                return False
        rolled = np.roll(M, 1, axis=1)
        rows = {tuple(r) for r in np.round(M, 12)}
        return all(tuple(r) in rows for r in np.round(rolled, 12))


def opposite_injection(n_electrodes: int = 16, amplitude: float = 1.0) -> StimulationProtocol:
    """Pattern i drives +amplitude into electrode i and out of i + L/2;
    voltages between adjacent electrodes with wrap-around."""
    L = n_electrodes
    if L % 2:
        raise DimensionMismatch("opposite injection needs an even electrode count")
    I = np.zeros((L, L // 2))
    for p in range(L // 2):
        I[p, p] = amplitude
        I[p + L // 2, p] = -amplitude
    return StimulationProtocol(I, adjacent_measurement(L))


def adjacent_measurement(n_electrodes: int) -> np.ndarray:
    M = np.eye(n_electrodes) - np.roll(np.eye(n_electrodes), 1, axis=1)
    return M


@dataclass(frozen=True)
class ForwardSolution:
    beta: np.ndarray
    gamma: np.ndarray

    def electrode_potentials(self) -> np.ndarray:
        return reference_matrix(len(self.gamma) + 1) @ self.gamma


@dataclass
class SystemMatrices:
    A: sp.csc_matrix
    B: sp.csr_matrix
    D: sp.csr_matrix
    E: sp.csr_matrix
    F: np.ndarray  # diagonal |e_l| / z_l
    C: np.ndarray
    ops: "CemOperators | None" = field(default=None, repr=False)
    sigma_eff: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_potential(self) -> int:
        return self.B.shape[0]


class AffinePattern:
    """Sparse symmetric matrix ``const + sum_k sigma_k G[:, k]`` on a fixed
    CSR pattern."""

    def __init__(self, n, const_rows, const_cols, const_vals, rows, cols, nodes, vals, n_nodes):
        keys_s = rows.astype(np.int64) * n + cols
        keys_c = const_rows.astype(np.int64) * n + const_cols
        keys, inverse = np.unique(np.concatenate([keys_s, keys_c]), return_inverse=True)
        inv_s, inv_c = inverse[: len(keys_s)], inverse[len(keys_s):]
        self.n = n
        self.rows = (keys // n).astype(np.int64)
        self.cols = (keys % n).astype(np.int64)
        self.indices = self.cols.astype(np.int32)
        self.indptr = np.searchsorted(self.rows, np.arange(n + 1)).astype(np.int32)
        self.const = np.bincount(inv_c, weights=const_vals, minlength=len(keys))
        self.G = sp.csr_matrix((vals, (inv_s, nodes)), shape=(len(keys), n_nodes))
        self.G.sum_duplicates()
        self.GT = self.G.T.tocsr()

    def data(self, sigma: np.ndarray) -> np.ndarray:
        return self.const + self.G @ sigma

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def csc(self, data: np.ndarray) -> sp.csc_matrix:
        # symmetric: the CSR arrays are also the CSC arrays
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def _expand(ptr, targets, coefs, src):
    """Expand each index in ``src`` through a CSR-like expansion table."""
    counts = np.diff(ptr)[src]
    rep = np.repeat(np.arange(len(src)), counts)
    within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    pos = ptr[src][rep] + within
    return rep, targets[pos], coefs[pos]


class CemOperators:
    """Sigma-independent structure for one (mesh, z) pair.

    ``paper`` holds A in block form [[B + D, EC], [C'E', C'FC]]. Solves use
    the congruent matrix T'AT with ``beta_j = delta_j + U_l`` for nodes j on
    electrode l: the O(1/z) terms then act on the small offsets delta only
    and the electrode blocks EC, C'FC cancel exactly (partition of unity),
    so no digits are lost between O(sigma) and O(1/z) entries.
    """

    def __init__(self, mesh: Mesh2D, z):
        z = np.broadcast_to(np.asarray(z, dtype=float), (mesh.n_electrodes,)).copy()
        if np.any(z <= 0):
            raise NonpositiveImpedance(f"contact impedances must be positive, got {z}")
        self.mesh, self.z = mesh, z
        L = mesh.n_electrodes
        M = mesh.n_quadratic_nodes
        self.n_potential, self.n_dof = M, M + L - 1
        self.C = C = reference_matrix(L)
        n = self.n_dof

        dofs = mesh.quadratic_dofs
        K = local_stiffness(mesh) * SIGMA_TO_SI  # (ne, 3, 6, 6)
        ne = mesh.n_elements
        rows_b = np.broadcast_to(dofs[:, None, :, None], (ne, 3, 6, 6)).ravel()
        cols_b = np.broadcast_to(dofs[:, None, None, :], (ne, 3, 6, 6)).ravel()
        nodes_b = np.broadcast_to(mesh.triangles[:, :, None, None], (ne, 3, 6, 6)).ravel()
        vals_b = K.ravel()

        # electrode edges: D (3x3 per edge) and E (3 x 1 per edge)
        shapes = p2_edge_shapes(EDGE_POINTS)
        mass1d = np.einsum("q,qi,qj->ij", EDGE_WEIGHTS, shapes, shapes)
        load1d = EDGE_WEIGHTS @ shapes
        d_rows, d_cols, d_vals = [], [], []
        e_rows, e_cols, e_vals = [], [], []
        q_nodes, q_shape, q_root, q_electrode = [], [], [], []
        self.electrode_length = np.zeros(L)
        self.electrode_of_node = np.full(M, -1)
        for l, group in enumerate(mesh.electrode_edges):
            group = np.asarray(group)
            if len(group) == 0:
                continue
            s = mesh.edge_measure(group)
            self.electrode_length[l] = s.sum()
            ends = mesh.edges[group]
            nodes = np.column_stack([ends[:, 0], mesh.edge_midpoint_nodes[group], ends[:, 1]])
            self.electrode_of_node[nodes.ravel()] = l
            d_rows.append(np.repeat(nodes, 3, axis=1).ravel())
            d_cols.append(np.tile(nodes, (1, 3)).ravel())
            d_vals.append((s[:, None, None] * mass1d[None] / z[l]).ravel())
            root = np.sqrt(s[:, None] * EDGE_WEIGHTS[None] / z[l])  # (edges, q)
            q_nodes.append(np.repeat(nodes, len(EDGE_WEIGHTS), axis=0))
            q_shape.append((root[:, :, None] * shapes[None]).reshape(-1, 3))
            q_root.append(root.ravel())
            q_electrode.append(np.full(root.size, l))
            e_rows.append(nodes.ravel())
            e_cols.append(np.full(nodes.size, l))
            e_vals.append((-s[:, None] * load1d[None] / z[l]).ravel())
        cat = lambda parts, dt=float: np.concatenate(parts) if parts else np.zeros(0, dt)
        self.D = sp.csr_matrix((cat(d_vals), (cat(d_rows, int), cat(d_cols, int))), shape=(M, M))
        self.E = sp.csr_matrix((cat(e_vals), (cat(e_rows, int), cat(e_cols, int))), shape=(M, L))
        self.F = self.electrode_length / z
        # contact term as a sum of squares over electrode quadrature points:
        # sum_l (1/z_l) int_(e_l) (u - U_l)^2 = |G u - H U|^2
        self._q_nodes = cat(q_nodes, int).reshape(-1, 3)
        self._q_shape = cat(q_shape).reshape(-1, 3)
        self._q_root = cat(q_root)
        self._q_electrode = cat(q_electrode, int)
        EC = sp.coo_matrix(self.E @ C)
        CFC = C.T @ (self.F[:, None] * C)
        cr, cc = np.meshgrid(np.arange(L - 1), np.arange(L - 1), indexing="ij")
        D = self.D.tocoo()

        self.paper = AffinePattern(
            n,
            np.concatenate([D.row, EC.row, M + EC.col, M + cr.ravel()]),
            np.concatenate([D.col, M + EC.col, EC.row, M + cc.ravel()]),
            np.concatenate([D.data, EC.data, EC.data, CFC.ravel()]),
            rows_b, cols_b, nodes_b, vals_b, mesh.n_linear_nodes,
        )

        # expansion beta_j -> delta_j + sum_k C[l, k] gamma_k for electrode nodes
        counts = np.ones(M, dtype=np.int64)
        on = self.electrode_of_node >= 0
        nzC = [np.flatnonzero(C[l]) for l in range(L)]
        counts[on] += np.array([len(nzC[l]) for l in self.electrode_of_node[on]], dtype=np.int64)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        targets = np.empty(ptr[-1], dtype=np.int64)
        coefs = np.empty(ptr[-1])
        targets[ptr[:-1]] = np.arange(M)
        coefs[ptr[:-1]] = 1.0
        for j in np.flatnonzero(on):
            l = self.electrode_of_node[j]
            targets[ptr[j] + 1: ptr[j + 1]] = M + nzC[l]
            coefs[ptr[j] + 1: ptr[j + 1]] = C[l, nzC[l]]
        rep1, R, cR = _expand(ptr, targets, coefs, rows_b)
        rep2, Cc, cC = _expand(ptr, targets, coefs, cols_b[rep1])
        src = rep1[rep2]
        self.shifted = AffinePattern(
            n, D.row, D.col, D.data,
            R[rep2], Cc, nodes_b[src], vals_b[src] * cR[rep2] * cC, mesh.n_linear_nodes,
        )
        self._electrode_nodes = np.flatnonzero(on)
        self._b_entries = np.flatnonzero((self.paper.rows < M) & (self.paper.cols < M))
        self._G_b = self.paper.G[self._b_entries]

    def system_data(self, sigma_eff: np.ndarray) -> np.ndarray:
        return self.paper.data(sigma_eff)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return self.paper.matrix(data)

    def contact_values(self, fields: np.ndarray) -> np.ndarray:
        """G applied to P2 fields (columns): sqrt-weighted traces at the
        electrode quadrature points."""
        return np.einsum("qi,qi...->q...", self._q_shape, fields[self._q_nodes])

    def contact_electrodes(self) -> np.ndarray:
        """H: sqrt weights placed in the column of each point's electrode."""
        H = np.zeros((len(self._q_root), self.mesh.n_electrodes))
        H[np.arange(len(self._q_root)), self._q_electrode] = self._q_root
        return H

    def stiffness(self, weights: np.ndarray) -> sp.csr_matrix:
        """B block for an arbitrary nodal weight field (no clipping)."""
        M = self.n_potential
        e = self._b_entries
        return sp.csr_matrix(
            (self._G_b @ weights, (self.paper.rows[e], self.paper.cols[e])), shape=(M, M)
        )

    def unshift(self, theta_shifted: np.ndarray) -> np.ndarray:
        """Map solutions of the shifted system back to [beta, gamma]."""
        M = self.n_potential
        theta = np.array(theta_shifted, dtype=float, copy=True)
        U = self.C @ theta[M:]
        nodes = self._electrode_nodes
        theta[nodes] += U[self.electrode_of_node[nodes]]
        return theta

    def factorize(self, sigma_eff: np.ndarray) -> "Factorization":
        return Factorization(self, sigma_eff)


class Factorization:
    """Sparse LU of the shifted system for one conductivity."""

    def __init__(self, ops: CemOperators, sigma_eff: np.ndarray):
        self.ops = ops
        self.data = ops.shifted.data(sigma_eff)
        self.lu = _factor(ops.shifted.csc(self.data))

    def solve_shifted(self, f: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(f, dtype=float))

    def solve(self, f: np.ndarray) -> np.ndarray:
        """Solution of A theta = f in the original [beta, gamma] unknowns."""
        return self.ops.unshift(self.solve_shifted(f))


def operators(mesh: Mesh2D, z) -> CemOperators:
    z = np.broadcast_to(np.asarray(z, dtype=float), (mesh.n_electrodes,))
    key = ("cem", z.tobytes())
    if key not in mesh._cache:
        mesh._cache[key] = CemOperators(mesh, z)
    return mesh._cache[key]


def effective_sigma(sigma: np.ndarray, floor: float | None) -> np.ndarray:
    if floor is None:
        if np.any(sigma <= 0):
            raise NonpositiveConductivity(
                f"{int(np.sum(sigma <= 0))} nonpositive nodal conductivities"
            )
        return sigma
    if floor <= 0:
        raise NonpositiveConductivity(f"clipping floor {floor} is not positive")
    return np.maximum(sigma, floor)


def assemble_system(mesh: Mesh2D, sigma, z, floor: float | None = None) -> SystemMatrices:
    ops = operators(mesh, z)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_linear_nodes,):
        raise DimensionMismatch(
            f"sigma has shape {sigma.shape}, mesh has {mesh.n_linear_nodes} linear nodes"
        )
    s = effective_sigma(sigma, floor)
    A = ops.matrix(ops.system_data(s))
    return SystemMatrices(
        A=A.tocsc(), B=ops.stiffness(s), D=ops.D, E=ops.E, F=ops.F.copy(), C=ops.C,
        ops=ops, sigma_eff=s,
    )


def _factor(A: sp.spmatrix):
    try:
        return splu(
            sp.csc_matrix(A),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise SingularSystem(str(exc)) from exc


def _rhs(protocol: StimulationProtocol, n_dof: int, n_potential: int, C: np.ndarray) -> np.ndarray:
    f = np.zeros((n_dof, protocol.n_injections))
    f[n_potential:] = C.T @ protocol.currents * CURRENT_TO_SI
    return f


def solve_forward(sys: SystemMatrices, protocol: StimulationProtocol, check: bool = True) -> list[ForwardSolution]:
    """One solution per current pattern from a single factorization.

    The residual is reported relative to ``|A| |theta| + |f|`` (normwise
    backward error); relative to ``|f|`` alone it is dominated by the
    cancellation of O(1/z) electrode terms.
    """
    L = sys.C.shape[0]
    if protocol.n_electrodes != L:
        raise DimensionMismatch(f"protocol has {protocol.n_electrodes} electrodes, system {L}")
    M = sys.n_potential
    f = _rhs(protocol, sys.A.shape[0], M, sys.C)
    ops = getattr(sys, "ops", None)
    if ops is not None:
        theta = ops.factorize(sys.sigma_eff).solve(f)
    else:
        theta = _factor(sys.A).solve(f)
    if check and np.any(f):
        A = sp.csr_matrix(sys.A)
        res = np.linalg.norm(A @ theta - f)
        scale = abs(A).max() * np.linalg.norm(theta) + np.linalg.norm(f)
        if not res <= 1e-10 * scale:
            raise SingularSystem(f"forward backward error {res / scale:.3g} exceeds 1e-10")
    return [ForwardSolution(theta[:M, p].copy(), theta[M:, p].copy()) for p in range(theta.shape[1])]


def compute_voltages(solutions, protocol: StimulationProtocol) -> np.ndarray:
    """Stacked voltages, injection-major."""
    if len(solutions) != protocol.n_injections:
        raise DimensionMismatch(
            f"{len(solutions)} solutions for {protocol.n_injections} current patterns"
        )
    gamma = np.column_stack([s.gamma for s in solutions])
    U = reference_matrix(protocol.n_electrodes) @ gamma
    return (protocol.measurement @ U).T.ravel()


class CemModel:
    """Full-order forward map sigma -> stacked voltages on a fixed mesh,
    contact impedances and protocol."""

    def __init__(self, mesh: Mesh2D, z, protocol: StimulationProtocol, floor: float | None = None):
        if protocol.n_electrodes != mesh.n_electrodes:
            raise DimensionMismatch(
                f"protocol has {protocol.n_electrodes} electrodes, mesh {mesh.n_electrodes}"
            )
        self.mesh, self.protocol, self.floor = mesh, protocol, floor
        self.ops = operators(mesh, z)
        self.z = self.ops.z
        M = self.ops.n_potential
        self._f = _rhs(protocol, self.ops.n_dof, M, self.ops.C)
        # adjoint sources: V_m = q_m . theta
        Q = np.zeros((self.ops.n_dof, protocol.measurement.shape[0]))
        Q[M:] = (protocol.measurement @ self.ops.C).T
        self._Q = Q

    @property
    def n_measurements(self) -> int:
        return self.protocol.n_measurements

    def _check(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (self.mesh.n_linear_nodes,):
            raise DimensionMismatch(
                f"sigma has shape {sigma.shape}, mesh has {self.mesh.n_linear_nodes} linear nodes"
            )
        return sigma

    def factorize(self, sigma) -> Factorization:
        return self.ops.factorize(effective_sigma(self._check(sigma), self.floor))

    def solve(self, sigma):
        """(shifted theta for all current patterns, factorization). The
        gamma rows, and hence voltages, are the same as in [beta, gamma]."""
        fac = self.factorize(sigma)
        return fac.solve_shifted(self._f), fac

    def voltages_from_theta(self, theta: np.ndarray) -> np.ndarray:
        return (self._Q.T @ theta).T.ravel()

    def forward(self, sigma) -> np.ndarray:
        theta, _ = self.solve(sigma)
        return self.voltages_from_theta(theta)

    def forward_with_potentials(self, sigma):
        theta, _ = self.solve(sigma)
        beta = self.ops.unshift(theta)[: self.ops.n_potential]
        return self.voltages_from_theta(theta), beta

    def jacobian(self, sigma):
        """(V, J) with J = dV/dsigma from adjoint fields on the same factor.

        With one adjoint field w_m per measurement row,
        dV_(p,m)/dsigma_k = -w_m^T (dB/dsigma_k) theta_p, evaluated for all
        k at once through the stiffness weight operator G.
        """
        sigma = self._check(sigma)
        theta, fac = self.solve(sigma)
        W = fac.solve_shifted(self._Q)
        pat = self.ops.shifted
        rows, cols = pat.rows, pat.cols
        Wr = W[rows]
        nm, ninj = W.shape[1], theta.shape[1]
        J = np.empty((ninj, nm, self.mesh.n_linear_nodes))
        for p in range(ninj):
            J[p] = -(pat.GT @ (Wr * theta[cols, p][:, None])).T
        J = J.reshape(ninj * nm, -1)
        if self.floor is not None:
            J[:, sigma < self.floor] = 0.0
        return self.voltages_from_theta(theta), J

    def resistance_matrix(self, sigma) -> np.ndarray:
        """L x L matrix R with U = R I for zero-sum currents I (mA -> V),
        built column by column from unit injections into each electrode."""
        fac = self.factorize(sigma)
        M = self.ops.n_potential
        L = self.mesh.n_electrodes
        f = np.zeros((self.ops.n_dof, L))
        f[M:] = self.ops.C.T * CURRENT_TO_SI
        gamma = fac.solve_shifted(f)[M:]
        return self.ops.C @ gamma


def jacobian(mesh: Mesh2D, sigma, z, protocol: StimulationProtocol, floor: float | None = None) -> np.ndarray:
    return CemModel(mesh, z, protocol, floor).jacobian(sigma)[1]


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian noise: std ``relative * |V_i|`` plus i.i.d. std
    ``range_fraction * (max V - min V)``."""

    relative: float = 0.01
    range_fraction: float = 0.001

    def std(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        spread = V.max() - V.min() if V.size else 0.0
        return np.sqrt((self.relative * np.abs(V)) ** 2 + (self.range_fraction * spread) ** 2)


def simulate_measurements(
    mesh_fine: Mesh2D,
    sigma_true,
    z,
    protocol: StimulationProtocol,
    noise: NoiseSpec,
    rng_seed: int,
    reconstruction_mesh: Mesh2D | None = None,
):
    """(V_meas, noise realization). ``sigma_true`` is nodal on ``mesh_fine``
    or a callable of (n, 2) points."""
    if reconstruction_mesh is not None and mesh_fine.n_elements <= reconstruction_mesh.n_elements:
        warnings.warn(
            "data mesh is not finer than the reconstruction mesh (inverse crime)",
            stacklevel=2,
        )
    if callable(sigma_true):
        sigma_true = sigma_true(mesh_fine.vertices)
    V = CemModel(mesh_fine, z, protocol).forward(np.asarray(sigma_true, dtype=float))
    rng = np.random.default_rng(rng_seed)
    e1 = rng.standard_normal(V.shape) * noise.relative * np.abs(V)
    spread = V.max() - V.min()
    e2 = rng.standard_normal(V.shape) * noise.range_fraction * spread
    e = e1 + e2
    return V + e, e
