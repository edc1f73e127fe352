"""Offline stage: prior ensemble, POD bases, reduced model and error model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .approx_error import NoiseModel, estimate_reduction_error
from .cem import CemModel, StimulationProtocol
from .errors import AsymmetricConfiguration
from .pod import (
    PodBasis,
    basis_from_spectrum,
    conductivity_pod,
    dimension_for,
    potential_spectrum,
    rotate_potential_basis,
)
from .prior import GaussianPrior
from .rom import ReducedModel, precompute_reduced

log = logging.getLogger(__name__)


@dataclass
class Ensemble:
    samples: np.ndarray  # (T, N) conductivities
    voltages: np.ndarray  # (T, m) full-order voltages
    potentials: np.ndarray  # (T, M, P') interior potentials for the POD injections
    injections: tuple  # injections whose potentials are stored
    seconds: float = 0.0


def solve_ensemble(model: CemModel, prior: GaussianPrior, count: int, seed, injections=(0,)) -> Ensemble:
    t0 = time.perf_counter()
    S = prior.sample(count, seed)
    inj = list(injections)
    V = np.empty((count, model.n_measurements))
    U = np.empty((count, model.mesh.n_quadratic_nodes, len(inj)))
    for i, s in enumerate(S):
        V[i], beta = model.forward_with_potentials(s)
        U[i] = beta[:, inj]
    return Ensemble(S, V, U, tuple(inj), time.perf_counter() - t0)


@dataclass
class OfflineBuild:
    reduced: ReducedModel
    error: NoiseModel
    sigma_basis: PodBasis
    potential_bases: tuple
    ensemble: Ensemble
    timings: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.reduced.n_sigma, self.reduced.n_potential


def build_offline(model: CemModel, prior: GaussianPrior, count: int, seed,
                  retain_sigma: float = 0.99, retain_potential: float = 0.99,
                  n_sigma: int | None = None, n_potential: int | None = None,
                  rotate: bool = True, ensemble: Ensemble | None = None,
                  error_seed=None) -> OfflineBuild:
    """Everything the reduced reconstruction needs, computed once.

    Explicit ``n_sigma``/``n_potential`` override the retained-variance
    rules. With ``rotate`` the potential basis of injection 0 is rotated to
    the other injections; otherwise, or when the rotated modes come out
    linearly dependent, each injection gets its own POD.
    ``error_seed`` draws a fresh ensemble for the reduction-error statistics
    instead of reusing the POD ensemble.
    """
    protocol: StimulationProtocol = model.protocol
    timings = {}
    if rotate and not protocol.is_rotation_invariant():
        rotate = False
    injections = (0,) if rotate else tuple(range(protocol.n_injections))
    if ensemble is None or ensemble.injections[: len(injections)] != injections:
        ensemble = solve_ensemble(model, prior, count, seed, injections)
    timings["ensemble"] = ensemble.seconds

    t0 = time.perf_counter()
    full_sigma = conductivity_pod(prior, 1.0)
    K = n_sigma if n_sigma is not None else dimension_for(full_sigma.eigenvalues, retain_sigma)
    sigma_basis = full_sigma.truncate(K)
    def kept(w):
        lam = np.zeros(model.mesh.n_quadratic_nodes)
        lam[: len(w)] = np.clip(w, 0.0, None)
        return dimension_for(lam, retain_potential)

    spectra = [potential_spectrum(ensemble.potentials[:, :, i]) for i in range(len(injections))]
    m = n_potential if n_potential is not None else max(kept(w) for _, w, _ in spectra)
    if rotate:
        base = basis_from_spectrum(spectra[0], m, 0)
        try:
            pot = tuple(rotate_potential_basis(base, model.mesh, p) for p in range(protocol.n_injections))
        except AsymmetricConfiguration as exc:
            log.warning("%s; solving the ensemble for every injection instead", exc)
            return build_offline(model, prior, count, seed, retain_sigma, retain_potential,
                                 n_sigma, n_potential, False, None, error_seed)
    else:
        pot = tuple(basis_from_spectrum(sp, m, p) for sp, p in zip(spectra, injections))
    timings["pod"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    reduced = precompute_reduced(model.mesh, sigma_basis, pot, model.z, protocol)
    timings["precompute"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if error_seed is None:
        error = estimate_reduction_error(ensemble.samples, ensemble.voltages, reduced)
    else:
        fresh = solve_ensemble(model, prior, count, error_seed, ())
        error = estimate_reduction_error(fresh.samples, fresh.voltages, reduced)
    timings["error_model"] = time.perf_counter() - t0
    log.info("offline build: N=%d M=%d %s", K, m, {k: round(v, 2) for k, v in timings.items()})
    return OfflineBuild(reduced, error, sigma_basis, pot, ensemble, timings)


def truncated(build: OfflineBuild, n_sigma: int, n_potential: int):
    """(reduced model, reduction-error model) for smaller dimensions,
    reusing the ensemble voltages."""
    r = build.reduced.truncate(n_sigma, n_potential)
    e = estimate_reduction_error(build.ensemble.samples, build.ensemble.voltages, r)
    return r, e
