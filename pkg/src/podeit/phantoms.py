"""Synthetic conductivity targets for the three simulated test cases.

Geometries and contrasts are paper-inspired defaults, not reproductions;
every parameter can be overridden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import PhantomOutsideDomain, UserError

BACKGROUND = 3.0  # uS/cm, equal to the default prior mean
RESISTIVE = 1.5
CONDUCTIVE = 4.5


@dataclass(frozen=True)
class SmoothBlob:
    """Gaussian dip (resistive) or bump in a constant background."""

    center: tuple = (-4.0, 3.0)
    width: float = 2.5
    amplitude: float = RESISTIVE - BACKGROUND
    background: float = BACKGROUND

    def extent(self):
        return [(np.asarray(self.center), 2 * self.width)]

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        r2 = np.sum((np.asarray(xy) - np.asarray(self.center)) ** 2, axis=-1)
        return self.background + self.amplitude * np.exp(-r2 / (2 * self.width**2))


@dataclass(frozen=True)
class Rectangles:
    """Axis-aligned rectangles (x0, y0, x1, y1) with a common value."""

    boxes: tuple = ((-8.0, -2.0, -4.0, 6.0), (1.0, 3.0, 8.0, 7.0), (0.0, -9.0, 5.0, -4.0))
    value: float = RESISTIVE
    background: float = BACKGROUND

    def extent(self):
        out = []
        for x0, y0, x1, y1 in self.boxes:
            c = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
            out.append((c, 0.5 * np.hypot(x1 - x0, y1 - y0)))
        return out

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy)
        out = np.full(xy.shape[:-1], self.background, dtype=float)
        for x0, y0, x1, y1 in self.boxes:
            inside = (xy[..., 0] >= x0) & (xy[..., 0] <= x1) & (xy[..., 1] >= y0) & (xy[..., 1] <= y1)
            out[inside] = self.value
        return out


@dataclass(frozen=True)
class DiskPair:
    """One resistive and one conductive disk."""

    centers: tuple = ((-5.0, 2.0), (4.0, -3.0))
    radii: tuple = (3.0, 3.0)
    values: tuple = (RESISTIVE, CONDUCTIVE)
    background: float = BACKGROUND

    def extent(self):
        return [(np.asarray(c), r) for c, r in zip(self.centers, self.radii)]

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy)
        out = np.full(xy.shape[:-1], self.background, dtype=float)
        for c, r, v in zip(self.centers, self.radii, self.values):
            out[np.sum((xy - np.asarray(c)) ** 2, axis=-1) <= r**2] = v
        return out


PHANTOMS = {"smooth-blob": SmoothBlob, "rectangles": Rectangles, "disk-pair": DiskPair}
TEST_CASES = {1: "smooth-blob", 2: "rectangles", 3: "disk-pair"}


def make_phantom(kind: str, radius: float = 14.0, **params):
    if kind not in PHANTOMS:
        raise UserError(f"unknown phantom {kind!r}; choose from {sorted(PHANTOMS)}")
    ph = PHANTOMS[kind](**params)
    for c, r in ph.extent():
        if np.linalg.norm(c) + r > radius:
            raise PhantomOutsideDomain(
                f"{kind} feature at {tuple(np.round(c, 3))} reaches beyond radius {radius}"
            )
    return ph


def p1_mass(mesh) -> sp.csr_matrix:
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    vals = mesh.areas[:, None, None] * local[None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_linear_nodes
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))


def relative_error(mesh, estimate, truth) -> float:
    """Relative L2(domain) error of piecewise-linear nodal fields."""
    m = p1_mass(mesh)
    e = np.asarray(estimate) - np.asarray(truth)
    t = np.asarray(truth)
    return float(np.sqrt(e @ (m @ e) / (t @ (m @ t))))
