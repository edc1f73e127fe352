"""Gauss-Newton MAP estimation and linearized posterior summaries."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .approx_error import NoiseModel
from .errors import (
    DimensionMismatch,
    Diverged,
    IndefiniteReducedSystem,
    NonpositiveConductivity,
    NotConverged,
    UserError,
)
from .mesh import Mesh2D


@dataclass(frozen=True)
class GnConfig:
    max_iterations: int = 50
    relative_cost_tolerance: float = 1e-6
    backtrack_factor: float = 0.5
    max_trials: int = 20
    step_floor: float = 1e-12

    def __post_init__(self):
        if not self.relative_cost_tolerance > 0:
            raise UserError("relative cost tolerance must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise UserError("backtracking factor must lie in (0, 1)")
        if self.max_iterations < 1 or self.max_trials < 1:
            raise UserError("iteration limits must be positive")


@dataclass
class MapResult:
    estimate: np.ndarray  # nodal conductivity
    coefficients: np.ndarray | None  # reduced coordinates, None for the full model
    cost_trace: np.ndarray
    iterations: int
    wall_time: float
    converged: bool
    kind: str = "full"
    context: dict = field(default_factory=dict, repr=False)


@dataclass
class PosteriorSummary:
    pointwise_std: np.ndarray
    estimate: np.ndarray
    section_points: np.ndarray | None = None
    section_estimate: np.ndarray | None = None
    section_std: np.ndarray | None = None

    @property
    def band(self):
        if self.section_estimate is None:
            return None
        return (self.section_estimate - 2 * self.section_std,
                self.section_estimate + 2 * self.section_std)


_STEP_FAILURES = (IndefiniteReducedSystem, NonpositiveConductivity, LinAlgError, FloatingPointError)


def gauss_newton(forward, jacobian, x0, prior_mean, prior_factor, prior_precision, noise_factor,
                 data, config: GnConfig):
    """Minimize |Lp (x - xp)|^2 + |Le (data - forward(x))|^2, Lp'Lp = P.

    ``data`` already has the error mean subtracted. Returns
    (x, cost trace, iterations, converged, last whitened Jacobian).
    """
    Lp, Le, P = prior_factor, noise_factor, prior_precision

    def cost(x, V):
        return float(np.sum((Lp @ (x - prior_mean)) ** 2) + np.sum((Le @ (data - V)) ** 2))

    x = np.array(x0, dtype=float)
    V, J = jacobian(x)
    c = cost(x, V)
    trace = [c]
    converged = False
    it = 0
    Jw = Le @ J
    while it < config.max_iterations:
        rw = Le @ (data - V)
        g = Jw.T @ rw - P @ (x - prior_mean)
        H = Jw.T @ Jw + P
        d = cho_solve(cho_factor(H), g)
        predicted = float(g @ d)
        if c == 0 or predicted <= config.step_floor * max(c, 1e-300) or not np.any(d):
            converged = True
            break
        t, accepted = 1.0, False
        for _ in range(config.max_trials):
            xt = x + t * d
            try:
                Vt = forward(xt)
            except _STEP_FAILURES:
                t *= config.backtrack_factor
                continue
            ct = cost(xt, Vt)
            if ct < c:
                accepted = True
                break
            t *= config.backtrack_factor
        if not accepted:
            if it == 0:
                raise Diverged("line search found no descent at the first iteration")
            # no decrease along the Gauss-Newton direction: at the floor of the cost
            converged = predicted <= config.relative_cost_tolerance * c
            break
        it += 1
        x = xt
        rel = (c - ct) / c
        c = ct
        trace.append(c)
        V, J = jacobian(x)
        Jw = Le @ J
        if rel < config.relative_cost_tolerance:
            converged = True
            break
    return x, np.array(trace), it, converged, Jw


def map_full(model, prior, noise: NoiseModel, V_meas, config: GnConfig = GnConfig()) -> MapResult:
    """MAP estimate with the full-order model, starting from the prior mean."""
    V_meas = np.asarray(V_meas, dtype=float)
    if V_meas.shape != (model.n_measurements,) or noise.dim != len(V_meas):
        raise DimensionMismatch("data, noise model and forward model disagree in size")
    if prior.dim != model.mesh.n_linear_nodes:
        raise DimensionMismatch("prior and mesh disagree in size")
    Le = noise.chol_prec
    P = prior.precision()
    t0 = time.perf_counter()
    x, trace, it, conv, Jw = gauss_newton(
        model.forward, model.jacobian, prior.mean, prior.mean, prior.chol_prec, P, Le,
        V_meas - noise.mean, config,
    )
    wall = time.perf_counter() - t0
    return MapResult(x, None, trace, it, wall, conv, "full",
                     {"jw": Jw, "prior_precision": P, "mesh": model.mesh})


def map_reduced(reduced_model, pod_eigenvalues, total_noise: NoiseModel, V_meas,
                config: GnConfig = GnConfig()) -> MapResult:
    """MAP estimate in POD coordinates with prior N(0, diag(eigenvalues))."""
    V_meas = np.asarray(V_meas, dtype=float)
    K = reduced_model.n_sigma
    lam = np.asarray(pod_eigenvalues, dtype=float)[:K]
    if len(lam) != K or np.any(lam <= 0):
        raise DimensionMismatch("need one positive eigenvalue per conductivity mode")
    if total_noise.dim != len(V_meas):
        raise DimensionMismatch("data and noise model disagree in size")
    Lp = np.diag(1.0 / np.sqrt(lam))
    P = np.diag(1.0 / lam)
    Le = total_noise.chol_prec
    zero = np.zeros(K)
    reduced_model.prepare()
    t0 = time.perf_counter()
    a, trace, it, conv, Jw = gauss_newton(
        reduced_model.forward, reduced_model.jacobian, zero, zero, Lp, P, Le,
        V_meas - total_noise.mean, config,
    )
    wall = time.perf_counter() - t0
    return MapResult(reduced_model.nodal(a), a, trace, it, wall, conv, "reduced",
                     {"jw": Jw, "prior_precision": P, "basis": reduced_model.sigma_basis.modes})


def nodal_values(mesh: Mesh2D, field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of nodal fields at points."""
    tri, bary = mesh.locate(points)
    return np.einsum("pi,pi...->p...", bary, field[mesh.triangles[tri]])


def chord(p0, p1, n: int = 101) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * np.asarray(p0, dtype=float) + t * np.asarray(p1, dtype=float)


def posterior_summary(result: MapResult, mesh: Mesh2D | None = None, section=None,
                      require_converged: bool = True) -> PosteriorSummary:
    """Laplace approximation at the estimate; ``section`` is an (n, 2) array
    of points at which the estimate and standard deviation are sampled."""
    if require_converged and not result.converged:
        raise NotConverged("posterior summary needs a converged estimate")
    Jw = result.context["jw"]
    H = Jw.T @ Jw + result.context["prior_precision"]
    cov = cho_solve(cho_factor(H), np.eye(len(H)))
    if result.kind == "reduced":
        Phi = result.context["basis"]
        var = np.einsum("ij,jk,ik->i", Phi, cov, Phi)
    else:
        var = np.diag(cov).copy()
    std = np.sqrt(np.clip(var, 0.0, None))
    summary = PosteriorSummary(std, result.estimate)
    if section is not None:
        mesh = mesh if mesh is not None else result.context.get("mesh")
        if mesh is None:
            raise UserError("a mesh is needed to sample a cross-section")
        pts = np.asarray(section, dtype=float)
        vals = nodal_values(mesh, np.column_stack([result.estimate, std]), pts)
        summary.section_points = pts
        summary.section_estimate = vals[:, 0]
        summary.section_std = vals[:, 1]
    return summary
