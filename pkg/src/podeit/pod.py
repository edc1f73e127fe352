"""Proper orthogonal decomposition of conductivity and potential ensembles."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import eigh, null_space, subspace_angles

from .cem import StimulationProtocol
from .errors import (
    AsymmetricConfiguration,
    DegenerateEnsemble,
    DimensionMismatch,
    EigensolveFailed,
    UserError,
)
from .mesh import Mesh2D


@dataclass(frozen=True, eq=False)
class PodBasis:
    """Orthonormal modes (columns) with nonincreasing eigenvalues.

    ``eigenvalues`` holds the full spectrum of the covariance, so retained
    variance can be evaluated for any truncation; only the first
    ``n_modes`` columns are stored in ``modes``.
    """

    modes: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    ambient: str = "conductivity"

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def dim(self) -> int:
        return self.modes.shape[0]

    @property
    def retained(self) -> np.ndarray:
        return retained_variance(self.eigenvalues)

    def truncate(self, n: int) -> "PodBasis":
        if not 0 <= n <= self.n_modes:
            raise UserError(f"cannot keep {n} of {self.n_modes} modes")
        return replace(self, modes=self.modes[:, :n])

    def project(self, field) -> np.ndarray:
        field = np.asarray(field, dtype=float)
        if field.shape[-1] != self.dim:
            raise DimensionMismatch(f"field of length {field.shape[-1]} for a basis of dimension {self.dim}")
        return (field - self.mean) @ self.modes

    def expand(self, coefficients) -> np.ndarray:
        return self.mean + np.asarray(coefficients) @ self.modes.T

    def content_hash(self) -> str:
        h = hashlib.sha256(self.ambient.encode())
        for a in (self.modes, self.eigenvalues, self.mean):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class RetainedVarianceCurve:
    values: np.ndarray
    threshold_dims: dict


def retained_variance(eigenvalues) -> np.ndarray:
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    c = np.cumsum(lam)
    if c[-1] <= 0:
        return np.ones_like(c)
    chi = c / c[-1]
    chi[-1] = 1.0
    return chi


def dimension_for(eigenvalues, retain: float) -> int:
    if not 0 < retain <= 1:
        raise UserError(f"retain must lie in (0, 1], got {retain}")
    chi = retained_variance(eigenvalues)
    if retain >= 1.0:
        return len(chi)
    return int(np.searchsorted(chi, retain - 1e-15) + 1)


def variance_curve(eigenvalues, thresholds=(0.9, 0.95, 0.99, 0.999)) -> RetainedVarianceCurve:
    return RetainedVarianceCurve(
        retained_variance(eigenvalues), {t: dimension_for(eigenvalues, t) for t in thresholds}
    )


def _fix_signs(modes: np.ndarray) -> np.ndarray:
    if modes.size == 0:
        return modes
    idx = np.argmax(np.abs(modes), axis=0)
    s = np.sign(modes[idx, np.arange(modes.shape[1])])
    s[s == 0] = 1.0
    return modes * s


def _sorted_eigh(S: np.ndarray):
    try:
        w, V = eigh(S)
    except np.linalg.LinAlgError as exc:
        raise EigensolveFailed(str(exc)) from exc
    return w[::-1], V[:, ::-1]


def _basis(mean, w, V, retain, ambient, dim, n_modes=None) -> PodBasis:
    """Truncate to ``n_modes`` or to the retained-variance rule; for retain = 1
    the full ambient dimension is returned, the zero-variance directions
    completed by an orthonormal complement."""
    lam = np.zeros(dim)
    lam[: len(w)] = np.clip(w, 0.0, None)
    n = dimension_for(lam, retain) if n_modes is None else int(n_modes)
    if not 0 <= n <= dim:
        raise UserError(f"cannot keep {n} modes of a {dim}-dimensional space")
    modes = V[:, : min(n, V.shape[1])]
    if n > modes.shape[1]:
        extra = null_space(modes.T) if modes.shape[1] else np.eye(dim)
        modes = np.hstack([modes, extra[:, : n - modes.shape[1]]])
    return PodBasis(_fix_signs(np.ascontiguousarray(modes)), lam, np.asarray(mean, dtype=float), ambient)


def conductivity_pod(prior, retain: float = 0.99) -> PodBasis:
    w, V = _sorted_eigh(prior.cov)
    return _basis(prior.mean, w, V, retain, "conductivity", prior.dim)


def potential_spectrum(ensemble):
    """(mean, eigenvalues, eigenvectors) of the sample covariance of the rows,
    leading eigenpairs first; snapshot method when there are fewer samples
    than unknowns."""
    U = np.asarray(ensemble, dtype=float)
    if U.ndim != 2 or U.shape[0] < 2:
        raise UserError("potential POD needs at least two samples")
    T, M = U.shape
    mean = U.mean(axis=0)
    X = U - mean
    if not np.any(X):
        raise DegenerateEnsemble("all potential samples are identical")
    if T < M:
        # X X' / (T-1) shares its nonzero spectrum with the covariance
        w, Y = _sorted_eigh(X @ X.T / (T - 1))
        keep = w > w[0] * 1e-13
        w, Y = w[keep], Y[:, keep]
        V = X.T @ Y / np.sqrt(w * (T - 1))
    else:
        w, V = _sorted_eigh(X.T @ X / (T - 1))
    return mean, w, V


def potential_pod(ensemble, retain: float = 0.99, injection: int = 0, n_modes: int | None = None) -> PodBasis:
    """POD of potential samples (rows of ``ensemble``). An explicit
    ``n_modes`` overrides ``retain``."""
    mean, w, V = potential_spectrum(ensemble)
    return _basis(mean, w, V, retain, f"potential({injection})", len(mean), n_modes)


def basis_from_spectrum(spectrum, n_modes: int, injection: int = 0) -> PodBasis:
    mean, w, V = spectrum
    return _basis(mean, w, V, 1.0, f"potential({injection})", len(mean), n_modes)


def quadratic_values(mesh: Mesh2D, coefficients: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate P2 fields (columns of ``coefficients``) at points."""
    tri, bary = mesh.locate(points)
    l0, l1, l2 = bary.T
    shape = np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])
    dofs = mesh.quadratic_dofs[tri]
    return np.einsum("pi,pi...->p...", shape, coefficients[dofs])


def rotation_angle(mesh: Mesh2D, injection_index: int) -> float:
    return 2 * np.pi * injection_index / mesh.n_electrodes


def rotate_points(points, angle):
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def rotate_potential_basis(basis: PodBasis, mesh: Mesh2D, injection_index: int,
                           protocol: StimulationProtocol | None = None) -> PodBasis:
    """Basis for injection ``injection_index`` (0-based) from the basis of
    injection 0 by rotating it through ``injection_index`` electrode pitches."""
    if protocol is not None and not protocol.is_rotation_invariant():
        raise AsymmetricConfiguration(
            "protocol is not invariant under electrode rotation; build per-injection ensembles"
        )
    if injection_index == 0:
        return replace(basis, ambient=f"potential({injection_index})")
    # field value at x after rotation equals the original field at R^-1 x
    pre = rotate_points(mesh.quadratic_nodes, -rotation_angle(mesh, injection_index))
    block = np.column_stack([basis.mean, basis.modes])
    vals = quadratic_values(mesh, block, pre)
    mean, V = vals[:, 0], vals[:, 1:]
    if V.shape[1]:
        # Loewdin orthonormalization keeps the modes as close as possible
        w, Q = eigh(V.T @ V)
        if w[0] <= 1e-10 * w[-1]:
            raise AsymmetricConfiguration(
                "rotated modes are linearly dependent on this mesh; build per-injection bases"
            )
        V = V @ (Q / np.sqrt(w)) @ Q.T
    return PodBasis(V, basis.eigenvalues, mean, f"potential({injection_index})")


def project(basis: PodBasis, field) -> np.ndarray:
    return basis.project(field)


def subspace_angles_deg(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.degrees(subspace_angles(A, B))
