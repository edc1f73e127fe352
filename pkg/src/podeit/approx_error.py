"""Gaussian error models: measurement noise, reduction error, and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .cem import NoiseSpec
from .errors import DimensionMismatch, EnsembleTooSmall, FactorizationFailed, ModelMismatch


@dataclass(frozen=True, eq=False)
class NoiseModel:
    mean: np.ndarray
    cov: np.ndarray
    jitter: float = 1e-10

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (len(mean), len(mean)):
            raise DimensionMismatch(f"mean of length {len(mean)} with covariance {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return len(self.mean)

    @cached_property
    def regularized_cov(self) -> np.ndarray:
        n = self.dim
        eps = self.jitter * np.trace(self.cov) / n if n else 0.0
        return self.cov + eps * np.eye(n)

    @cached_property
    def chol_prec(self) -> np.ndarray:
        """Lower-triangular L with L'L = inv(regularized cov)."""
        try:
            Lc = np.linalg.cholesky(self.regularized_cov)
        except np.linalg.LinAlgError as exc:
            raise FactorizationFailed("noise covariance is not positive definite") from exc
        return solve_triangular(Lc, np.eye(self.dim), lower=True)

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self.chol_prec @ r

    def summary(self) -> dict:
        w = np.linalg.eigvalsh(self.cov)
        return {
            "dim": self.dim,
            "trace": float(np.trace(self.cov)),
            "min_eigenvalue": float(w[0]),
            "max_eigenvalue": float(w[-1]),
            "mean_norm": float(np.linalg.norm(self.mean)),
        }


def measurement_noise(V: np.ndarray, spec: NoiseSpec) -> NoiseModel:
    """Zero-mean diagonal model with the simulation noise levels at V."""
    std = spec.std(V)
    return NoiseModel(np.zeros(len(std)), np.diag(std**2))


def estimate_reduction_error(ensemble, full, reduced_model, batch: int = 256) -> NoiseModel:
    """Sample statistics of V_full(sigma_i) - V_red(P sigma_i).

    ``full`` is either a full-order model with ``forward`` or the (T, m)
    array of voltages already computed for the ensemble.
    """
    S = np.atleast_2d(np.asarray(ensemble, dtype=float))
    T = S.shape[0]
    if T < 2:
        raise EnsembleTooSmall(f"need at least 2 samples, got {T}")
    if hasattr(full, "forward"):
        mesh_hash = full.mesh.content_hash()
        if reduced_model.mesh_hash and mesh_hash != reduced_model.mesh_hash:
            raise ModelMismatch("full and reduced models were built on different meshes")
        Vf = np.array([full.forward(s) for s in S])
    else:
        Vf = np.asarray(full, dtype=float)
        if Vf.shape[0] != T:
            raise DimensionMismatch(f"{Vf.shape[0]} voltage rows for {T} samples")
    alpha = reduced_model.sigma_basis.project(S)
    # bound the batched dense systems to roughly 160 MB
    m1 = reduced_model.n_potential + reduced_model.C.shape[1] + 1
    batch = max(1, min(batch, int(2e7 // (reduced_model.n_injections * m1 * m1))))
    Vr = np.concatenate([reduced_model.forward(alpha[i:i + batch]) for i in range(0, T, batch)])
    if Vr.shape != Vf.shape:
        raise ModelMismatch(f"reduced voltages {Vr.shape} vs full {Vf.shape}")
    err = Vf - Vr
    return NoiseModel(err.mean(axis=0), np.cov(err, rowvar=False, ddof=1))


def compose_total_error(measurement: NoiseModel, reduction: NoiseModel) -> NoiseModel:
    if measurement.dim != reduction.dim:
        raise DimensionMismatch(f"noise dimensions {measurement.dim} and {reduction.dim}")
    return NoiseModel(measurement.mean + reduction.mean, measurement.cov + reduction.cov)


def zero_error(dim: int) -> NoiseModel:
    return NoiseModel(np.zeros(dim), np.zeros((dim, dim)))
