"""Reduced-order complete electrode model on POD bases.

For injection p the potential is u0_p + V_p c and the conductivity is
sigma0 + sum_k alpha_k phi_k. Writing W_p = [u0_p, V_p], the reduced
matrix on [beta0, c, gamma] is

    [[W' B(alpha) W + W' D W,  W' E C],
     [C' E' W,                 C' F C]]

with B(alpha) = B(sigma0) + sum_k alpha_k B(phi_k), each block W' B(phi_k) W
precomputed. beta0 = 1 is fixed and its column moves to the right-hand side.
The contact blocks D, E, F are kept in factored form (see ``_frame``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .cem import CURRENT_TO_SI, StimulationProtocol, operators
from .errors import DimensionMismatch, IndefiniteReducedSystem, ModelMismatch
from .mesh import Mesh2D
from .pod import PodBasis


@dataclass(frozen=True, eq=False)
class ReducedModel:
    sigma_basis: PodBasis
    potential_bases: tuple
    B_stack: np.ndarray  # (P, K+1, m+1, m+1); k = 0 is the mean conductivity
    G_stack: np.ndarray  # (P, q, m+1) contact traces of [u0, modes]
    H: np.ndarray  # (q, L) contact weights per electrode
    C: np.ndarray
    protocol: StimulationProtocol
    mesh_hash: str = ""
    z: np.ndarray | None = None

    @property
    def n_sigma(self) -> int:
        return self.B_stack.shape[1] - 1

    @property
    def n_potential(self) -> int:
        return self.B_stack.shape[2] - 1

    @property
    def n_injections(self) -> int:
        return self.B_stack.shape[0]

    @property
    def D_red(self) -> np.ndarray:
        return np.einsum("pqi,pqj->pij", self.G_stack, self.G_stack)

    @property
    def E_red(self) -> np.ndarray:
        return -np.einsum("pqi,ql->pil", self.G_stack, self.H)

    @property
    def F(self) -> np.ndarray:
        return np.einsum("ql,ql->l", self.H, self.H)

    def truncate(self, n_sigma: int | None = None, n_potential: int | None = None) -> "ReducedModel":
        """Leading ``n_sigma`` conductivity and ``n_potential`` potential modes.

        The potential slice keeps the first columns of each stored basis; for
        rotated bases these are re-orthonormalized rotations, not a rebuild.
        """
        K = self.n_sigma if n_sigma is None else n_sigma
        m = self.n_potential if n_potential is None else n_potential
        if not (0 <= K <= self.n_sigma and 0 <= m <= self.n_potential):
            raise DimensionMismatch(
                f"cannot truncate ({self.n_sigma}, {self.n_potential}) to ({K}, {m})"
            )
        return replace(
            self,
            sigma_basis=self.sigma_basis.truncate(K),
            potential_bases=tuple(b.truncate(m) for b in self.potential_bases),
            B_stack=np.ascontiguousarray(self.B_stack[:, : K + 1, : m + 1, : m + 1]),
            G_stack=np.ascontiguousarray(self.G_stack[:, :, : m + 1]),
        )

    def nodal(self, alpha) -> np.ndarray:
        return self.sigma_basis.expand(alpha)

    def content_hash(self) -> str:
        h = hashlib.sha256(self.mesh_hash.encode())
        for a in (self.B_stack, self.G_stack, self.H, self.protocol.currents, self.protocol.measurement):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    # online evaluation -------------------------------------------------

    @cached_property
    def _frame(self):
        """Per injection, the right singular vectors Y of the free contact
        block [G_c, -H C] with squared singular values and the beta0 coupling.

        In the coordinates x = Y' [c; gamma] the O(1/z) contact term is the
        diagonal s^2 and never mixes with the O(sigma) stiffness entries, so
        a Jacobi-scaled factorization resolves both scales.
        """
        P, m = self.n_injections, self.n_potential
        HC = self.H @ self.C
        n = m + HC.shape[1]
        Y = np.empty((P, n, n))
        s2 = np.zeros((P, n))
        r0 = np.zeros((P, n))
        for p in range(P):
            Gf = np.hstack([self.G_stack[p, :, 1:], -HC])
            U, sv, Vt = np.linalg.svd(Gf, full_matrices=True)
            Y[p] = Vt.T
            k = len(sv)
            s2[p, :k] = sv**2
            r0[p, :k] = sv * (U[:, :k].T @ self.G_stack[p, :, 0])
        f = (self.C.T @ self.protocol.currents * CURRENT_TO_SI).T  # (P, L-1)
        fy = np.einsum("pjn,pj->pn", Y[:, m:], f) - r0
        return Y, s2, fy

    def _solve(self, alpha):
        """Reduced states [c; gamma] (..., P, n) and the scaled factor data."""
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape[-1] != self.n_sigma:
            raise DimensionMismatch(f"alpha has {alpha.shape[-1]} entries, model has {self.n_sigma} modes")
        Y, s2, fy = self._frame
        m = self.n_potential
        a = np.concatenate([np.ones(alpha.shape[:-1] + (1,)), alpha], axis=-1)
        P, m1 = self.n_injections, m + 1
        flat = self.B_stack.reshape(P, -1, m1 * m1)
        if a.ndim == 1:
            Bsum = (a @ flat).reshape(P, m1, m1)
        else:
            lead = a.shape[:-1]
            Bsum = np.moveaxis(a.reshape(-1, a.shape[-1]) @ flat, 0, 1).reshape(lead + (P, m1, m1))
        Yc = Y[:, :m]
        A = np.swapaxes(Yc, -1, -2) @ Bsum[..., 1:, 1:] @ Yc
        idx = np.arange(A.shape[-1])
        A[..., idx, idx] += s2
        rhs = fy - np.einsum("pin,...pi->...pn", Yc, Bsum[..., 1:, 0])
        d = 1.0 / np.sqrt(np.abs(A[..., idx, idx]))
        As = d[..., :, None] * A * d[..., None, :]
        b = (d * rhs)[..., None]
        if a.ndim == 1:
            factors = []
            y = np.empty_like(b)
            for p in range(P):
                c, info = dpotrf(As[p], lower=1, clean=0)
                if info != 0:
                    raise IndefiniteReducedSystem(
                        f"reduced system of injection {p} is not positive definite at this alpha"
                    )
                factors.append(c)
                y[p] = dpotrs(c, b[p], lower=1)[0]
        else:
            factors = None
            try:
                np.linalg.cholesky(As)
            except np.linalg.LinAlgError as exc:
                raise IndefiniteReducedSystem(
                    "reduced system is not positive definite at this alpha"
                ) from exc
            y = np.linalg.solve(As, b)
        x = d * y[..., 0]
        theta = np.einsum("pnj,...pj->...pn", Y, x)
        return theta, (Y, factors, d)

    def prepare(self) -> "ReducedModel":
        """Run the one-off per-model setup now rather than on first use."""
        self._frame, self._B_free
        return self

    @cached_property
    def _B_free(self) -> np.ndarray:
        return np.ascontiguousarray(self.B_stack[:, 1:, 1:, :])

    def _voltages(self, theta) -> np.ndarray:
        gamma = theta[..., self.n_potential:]
        V = gamma @ self.C.T @ self.protocol.measurement.T  # (..., P, rows)
        return V.reshape(V.shape[:-2] + (-1,))

    def forward(self, alpha) -> np.ndarray:
        """Stacked voltages; ``alpha`` may carry leading batch axes."""
        return self._voltages(self._solve(alpha)[0])

    def solve(self, alpha):
        """(c, gamma) per injection: arrays (P, m) and (P, L-1)."""
        theta, _ = self._solve(alpha)
        m = self.n_potential
        return theta[..., :m], theta[..., m:]

    def potentials(self, alpha) -> np.ndarray:
        c, _ = self.solve(alpha)
        return np.stack([b.expand(ci) for b, ci in zip(self.potential_bases, c)])

    def jacobian(self, alpha):
        """(V, dV/dalpha) for a single alpha, by adjoint solves on the small
        dense systems: dV_(p,r)/dalpha_k = -w_r' B_k [1; c_p]."""
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim != 1:
            raise DimensionMismatch("jacobian takes a single coefficient vector")
        theta, (Y, factors, d) = self._solve(alpha)
        m = self.n_potential
        Q = (self.protocol.measurement @ self.C).T  # (L-1, rows)
        qy = np.einsum("pjn,jr->pnr", Y[:, m:], Q)
        rq = d[..., None] * qy
        Wy = d[..., None] * np.stack([dpotrs(c, r, lower=1)[0] for c, r in zip(factors, rq)])
        Wc = Y[:, :m] @ Wy  # adjoint fields on the c block, (P, m, rows)
        full = np.concatenate([np.ones((theta.shape[0], 1)), theta[:, :m]], axis=1)
        Bx = self._B_free @ full[:, None, :, None]  # (P, K, m, 1)
        J = -np.swapaxes(Wc, 1, 2) @ np.swapaxes(Bx[..., 0], 1, 2)  # (P, rows, K)
        return self._voltages(theta), J.reshape(-1, self.n_sigma)


def precompute_reduced(mesh: Mesh2D, sigma_basis: PodBasis, potential_bases, z,
                       protocol: StimulationProtocol) -> ReducedModel:
    """Offline Galerkin projection of the affine matrix stack."""
    ops = operators(mesh, z)
    if sigma_basis.dim != mesh.n_linear_nodes:
        raise ModelMismatch(
            f"conductivity basis has dimension {sigma_basis.dim}, mesh {mesh.n_linear_nodes}"
        )
    if len(potential_bases) != protocol.n_injections:
        raise ModelMismatch(
            f"{len(potential_bases)} potential bases for {protocol.n_injections} injections"
        )
    if protocol.n_electrodes != mesh.n_electrodes:
        raise ModelMismatch(
            f"protocol has {protocol.n_electrodes} electrodes, mesh {mesh.n_electrodes}"
        )
    for b in potential_bases:
        if b.dim != mesh.n_quadratic_nodes:
            raise ModelMismatch(
                f"potential basis has dimension {b.dim}, mesh {mesh.n_quadratic_nodes}"
            )
    m = potential_bases[0].n_modes
    if any(b.n_modes != m for b in potential_bases):
        raise ModelMismatch("potential bases differ in size")
    P = len(potential_bases)
    W = np.stack([np.column_stack([b.mean, b.modes]) for b in potential_bases])  # (P, M, m+1)
    Wall = np.concatenate(list(W), axis=1)
    phis = np.column_stack([sigma_basis.mean, sigma_basis.modes])
    K = phis.shape[1]
    B_stack = np.empty((P, K, m + 1, m + 1))
    for k in range(K):
        BW = ops.stiffness(phis[:, k]) @ Wall
        for p in range(P):
            blk = W[p].T @ BW[:, p * (m + 1): (p + 1) * (m + 1)]
            B_stack[p, k] = 0.5 * (blk + blk.T)
    G_stack = np.stack([ops.contact_values(W[p]) for p in range(P)])
    return ReducedModel(
        sigma_basis, tuple(potential_bases), B_stack, G_stack, ops.contact_electrodes(),
        ops.C, protocol, mesh.content_hash(), ops.z.copy(),
    )


def _check_protocol(model: ReducedModel, protocol):
    if protocol is None or protocol is model.protocol:
        return
    if not (np.array_equal(protocol.currents, model.protocol.currents)
            and np.array_equal(protocol.measurement, model.protocol.measurement)):
        raise ModelMismatch("protocol differs from the one the model was built for")


def reduced_forward(model: ReducedModel, alpha_pod, protocol: StimulationProtocol | None = None) -> np.ndarray:
    _check_protocol(model, protocol)
    return model.forward(alpha_pod)


def reduced_jacobian(model: ReducedModel, alpha_pod, protocol: StimulationProtocol | None = None) -> np.ndarray:
    _check_protocol(model, protocol)
    return model.jacobian(alpha_pod)[1]
