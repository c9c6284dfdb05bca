"""
Joint densities f_{d,z}(y) of (Y, D=d) given Z=z, and support identification.

Exact fields come from the change of variables through the structural map; kernel
fields from a binned product-Epanechnikov estimate with reflection at the support box.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import ConvexHull

from .domain import QuadratureGrid
from .errors import InsufficientDataError, InvalidBandwidthError
from .model import ObservedSample, StructuralModel
from .transport import QuantileMap, invert_points, solve_gradient
from .utils.array_ops import ensure_points, to_frame

logger = logging.getLogger(__name__)

EXACT = "exact"
KERNEL = "kernel"
MIN_CELL_ROWS = 100
SUPPORT_RESOLUTION = 50
RELATIVE_SUPPORT_THRESHOLD = 1e-3


def _box_grid(lo: np.ndarray, hi: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell centers (lexicographic) and widths of a tensor grid on [lo, hi]."""
    widths = (hi - lo) / resolution
    axes = [lo[i] + (np.arange(resolution) + 0.5) * widths[i] for i in range(lo.shape[0])]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.shape[0])
    return centers, widths


# ============== Fields ==============

class DensityField(ABC):
    """f_{d,z} on the outcome space; zero outside its support."""

    d: int
    z: int
    provenance: str
    gradient_provenance: str

    @property
    @abstractmethod
    def dimension(self) -> int: ...

    @property
    @abstractmethod
    def box(self) -> tuple[np.ndarray, np.ndarray]: ...

    @property
    @abstractmethod
    def total_mass(self) -> float: ...

    @abstractmethod
    def evaluate(self, ys) -> np.ndarray: ...

    @abstractmethod
    def gradient(self, ys) -> np.ndarray: ...

    @abstractmethod
    def support_distance(self, ys) -> np.ndarray:
        """Signed distance (or a same-sign surrogate) to the boundary of the support of Y_d."""

    def integrate(self, resolution: int = 100) -> float:
        """Midpoint integral of the evaluator over its box."""
        lo, hi = self.box
        centers, widths = _box_grid(lo, hi, resolution)
        return float(self.evaluate(centers).sum() * np.prod(widths))

    def describe(self) -> dict:
        return {
            "d": self.d,
            "z": self.z,
            "provenance": self.provenance,
            "gradient_provenance": self.gradient_provenance,
            "total_mass": self.total_mass,
        }


class ExactDensityField(DensityField):
    """
    f_{d,z}(y) = rho(u) * P(D=d | Z=z, cell of u) / det Dq_d(u), u = q_d^{-1}(y).
    """

    provenance = EXACT
    gradient_provenance = EXACT

    def __init__(self, model: StructuralModel, d: int, z: int):
        # fails early for couplings without a closed-form conditional law
        model.rank_weight(d, z, model.measure.domain.center[None, :])
        self.model = model
        self.d = int(d)
        self.z = int(z)
        self.map: QuantileMap = model.maps[d]

    @property
    def dimension(self) -> int:
        return self.model.dimension

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.map.image_box

    @property
    def total_mass(self) -> float:
        return float(self.model.share_matrix()[self.d, self.z])

    def _preimage(self, ys):
        ys = ensure_points(ys, self.dimension)
        return invert_points(self.map, ys)

    def evaluate(self, ys) -> np.ndarray:
        u, inside = self._preimage(ys)
        values = np.zeros(u.shape[0])
        if inside.any():
            weight = self.model.rank_weight(self.d, self.z, u[inside])
            det = np.linalg.det(self.map.jacobians(u[inside]))
            values[inside] = weight / det
        return values

    def evaluate_at_preimage(self, u) -> np.ndarray:
        """f_{d,z}(q_d(u)) for u in U without inverting the map."""
        u = ensure_points(u, self.dimension)
        return self.model.rank_weight(self.d, self.z, u) / np.linalg.det(self.map.jacobians(u))

    def gradient(self, ys) -> np.ndarray:
        u, inside = self._preimage(ys)
        grads = np.zeros_like(u)
        if inside.any():
            grads[inside] = self.gradient_at_preimage(u[inside])
        return grads

    def gradient_at_preimage(self, u) -> np.ndarray:
        """
        grad_y f at y = q_d(u).

        With H = Dq_d(u) and T its derivative, grad_u log f = grad log rho - tr(H^{-1} dH/du_k),
        and grad_y f = H^{-1} grad_u f. The copula weight is piecewise constant.
        """
        u = ensure_points(u, self.dimension)
        measure = self.model.measure
        hess = self.map.jacobians(u)
        third = self.map.potential.third_derivative(u)
        inverse = np.linalg.inv(hess)
        values = self.evaluate_at_preimage(u)
        rho = measure.density(u)
        log_rho = np.divide(measure.density_gradient(u), rho[:, None], out=np.zeros_like(u), where=rho[:, None] > 0)
        log_det = np.einsum("nij,njik->nk", inverse, third)
        grad_u = values[:, None] * (log_rho - log_det)
        return np.einsum("nij,nj->ni", inverse, grad_u)

    def support_distance(self, ys) -> np.ndarray:
        ys = ensure_points(ys, self.dimension)
        u = solve_gradient(self.map.potential, ys, start=self.map.initial_guess(ys))
        return self.model.measure.domain.signed_distance(u)


class KernelDensityField(DensityField):
    """Binned kernel estimate, linearly interpolated between bin centers."""

    provenance = KERNEL
    gradient_provenance = "finite-difference"

    def __init__(self, d: int, z: int, edges: list, values: np.ndarray, bandwidth: np.ndarray, share: float):
        self.d = int(d)
        self.z = int(z)
        self.edges = [np.asarray(e, dtype=float) for e in edges]
        self.values = values
        self.bandwidth = np.asarray(bandwidth, dtype=float)
        self.share = float(share)
        centers = [0.5 * (e[1:] + e[:-1]) for e in self.edges]
        self._interpolator = RegularGridInterpolator(
            centers, values, method="linear", bounds_error=False, fill_value=None
        )

    @property
    def dimension(self) -> int:
        return len(self.edges)

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([e[0] for e in self.edges]), np.array([e[-1] for e in self.edges])

    @property
    def bin_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    @property
    def total_mass(self) -> float:
        return float(self.values.sum() * self.bin_volume)

    def evaluate(self, ys) -> np.ndarray:
        ys = ensure_points(ys, self.dimension)
        lo, hi = self.box
        inside = np.all((ys >= lo) & (ys <= hi), axis=1)
        out = np.zeros(ys.shape[0])
        if inside.any():
            out[inside] = np.maximum(self._interpolator(ys[inside]), 0.0)
        return out

    def gradient(self, ys) -> np.ndarray:
        ys = ensure_points(ys, self.dimension)
        step = 0.5 * min(e[1] - e[0] for e in self.edges)
        grads = np.zeros_like(ys)
        for i in range(self.dimension):
            offset = np.zeros(self.dimension)
            offset[i] = step
            grads[:, i] = (self.evaluate(ys + offset) - self.evaluate(ys - offset)) / (2.0 * step)
        return grads

    @cached_property
    def support(self) -> "SupportSet":
        return identify_support([self])

    def support_distance(self, ys) -> np.ndarray:
        return self.support.signed_distance(ys)


# ============== Construction ==============

def exact_density(model: StructuralModel, d: int, z: int, grid: QuadratureGrid | None = None) -> ExactDensityField:
    """
    Exact f_{d,z} by Legendre inversion, Jacobian determinant and conditional rank density.

    When a grid is given, the pulled-back mass sum_u w(u) f(q(u)) det Dq(u) is logged
    as a quadrature check.

    Raises:
        UnsupportedCouplingError: the model's U-given-(D, Z) law is not computable
    """
    field = ExactDensityField(model, d, z)
    if grid is not None:
        mass = grid.integrate(model.rank_weight(d, z, grid.nodes))
        logger.debug("f_{%d,%d}: quadrature mass %.6g, share %.6g", d, z, mass, field.total_mass)
    return field


def exact_fields(model: StructuralModel) -> dict:
    """All exact fields keyed by (d, z)."""
    m = model.treatments
    return {(d, z): exact_density(model, d, z) for d in range(m) for z in range(m)}


def _epanechnikov_weights(bandwidth: float, width: float) -> np.ndarray:
    radius = max(int(np.floor(bandwidth / width)), 0)
    offsets = np.arange(-radius, radius + 1) * width / bandwidth
    weights = np.clip(0.75 * (1.0 - offsets ** 2), 0.0, None)
    if weights.sum() <= 0.0:
        weights = np.ones(1)
    return weights / weights.sum()


def estimate_density(
    sample: ObservedSample,
    d: int,
    z: int,
    bandwidth=None,
    box: tuple | None = None,
    bins: int | None = None,
    min_rows: int = MIN_CELL_ROWS,
) -> KernelDensityField:
    """
    Product-Epanechnikov estimate of f_{d,z}.

    The (d, z) rows are binned on the support box, the histogram is convolved with the
    discretised kernel under reflecting boundaries (which conserves mass), and the result
    is scaled by the empirical share of D=d within Z=z.

    Args:
        sample: Observed data
        d, z: Cell
        bandwidth: Per-axis bandwidth (scalar or (p,)); default n^{-1/(p+4)} * sample sd
        box: Support box; default the range of all rows with D=d
        bins: Bins per axis; default about four per bandwidth

    Returns:
        KernelDensityField whose bin masses sum to the empirical share
    """
    rows = sample.cell(d, z)
    n_dz = rows.shape[0]
    if n_dz < min_rows:
        raise InsufficientDataError(f"Only {n_dz} rows with (D, Z) = ({d}, {z}); need {min_rows}")
    p = sample.dimension
    n_z = int(np.count_nonzero(sample.z == z))

    if bandwidth is None:
        h = n_dz ** (-1.0 / (p + 4)) * rows.std(axis=0, ddof=1)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (p,)).copy()
    if (h <= 0).any() or not np.isfinite(h).all():
        raise InvalidBandwidthError(f"Bandwidth must be positive, got {h.tolist()}")

    if box is None:
        treated = sample.y[sample.d == d]
        lo, hi = treated.min(axis=0), treated.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
    span = np.maximum(hi - lo, 1e-12)
    if bins is None:
        per_axis = np.clip(np.ceil(4.0 * span / h), 16, 256 if p <= 2 else 48).astype(int)
    else:
        per_axis = np.full(p, int(bins))
    edges = [np.linspace(lo[i], hi[i], per_axis[i] + 1) for i in range(p)]

    counts, _ = np.histogramdd(rows, bins=edges)
    mass = counts / n_z
    kernel = _epanechnikov_weights(h[0], edges[0][1] - edges[0][0])
    for i in range(1, p):
        kernel = np.multiply.outer(kernel, _epanechnikov_weights(h[i], edges[i][1] - edges[i][0]))
    smoothed = ndimage.convolve(mass, kernel, mode="reflect")
    volume = float(np.prod([e[1] - e[0] for e in edges]))
    field = KernelDensityField(d, z, edges, smoothed / volume, h, n_dz / n_z)
    logger.debug("Kernel f_{%d,%d}: %d rows, bandwidth %s, bins %s", d, z, n_dz, h.round(4).tolist(), per_axis.tolist())
    return field


def estimated_fields(sample: ObservedSample, treatments: int, bandwidth=None) -> dict:
    """Kernel fields for every (d, z); fields of one treatment share a support box."""
    fields = {}
    for d in range(treatments):
        treated = sample.y[sample.d == d]
        box = (treated.min(axis=0), treated.max(axis=0)) if treated.size else None
        for z in range(treatments):
            fields[(d, z)] = estimate_density(sample, d, z, bandwidth=bandwidth, box=box)
    return fields


# ============== Support ==============

@dataclass(frozen=True, eq=False)
class SupportSet:
    """Positive cells of max_z f_{d,z} and their convex hull."""

    cells: np.ndarray
    widths: np.ndarray
    hull_vertices: np.ndarray
    equations: np.ndarray

    @property
    def empty(self) -> bool:
        return self.cells.shape[0] == 0

    @property
    def dimension(self) -> int:
        return self.widths.shape[0]

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.empty:
            return np.zeros(self.dimension), np.zeros(self.dimension)
        return self.cells.min(axis=0) - self.widths / 2, self.cells.max(axis=0) + self.widths / 2

    def signed_distance(self, points) -> np.ndarray:
        """max over hull facets of the facet offset; equals the distance to the boundary inside the hull."""
        points = ensure_points(points, self.dimension)
        if self.empty:
            return np.full(points.shape[0], np.inf)
        return (points @ self.equations[:, :-1].T + self.equations[:, -1]).max(axis=1)

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        return self.signed_distance(points) <= tol

    def to_dict(self) -> dict:
        return {
            "cells": self.cells.tolist(),
            "cell_widths": self.widths.tolist(),
            "hull_vertices": self.hull_vertices.tolist(),
        }


def _cell_corners(cells: np.ndarray, widths: np.ndarray) -> np.ndarray:
    p = cells.shape[1]
    signs = np.stack(np.meshgrid(*([[-0.5, 0.5]] * p), indexing="ij"), axis=-1).reshape(-1, p)
    return (cells[:, None, :] + signs[None, :, :] * widths).reshape(-1, p)


def identify_support(fields, threshold: float | None = None, resolution: int = SUPPORT_RESOLUTION) -> SupportSet:
    """
    Cells where max_z f_{d,z} exceeds the threshold, with the convex hull of their corners.

    Args:
        fields: DensityFields of one treatment (one per instrument value)
        threshold: Absolute floor; default 1e-3 * max field value
        resolution: Cells per axis over the fields' common box

    Returns:
        SupportSet (empty when every field vanishes)
    """
    fields = list(fields)
    lo = np.min([f.box[0] for f in fields], axis=0)
    hi = np.max([f.box[1] for f in fields], axis=0)
    centers, widths = _box_grid(lo, hi, resolution)
    values = np.max([f.evaluate(centers) for f in fields], axis=0)
    p = centers.shape[1]
    top = float(values.max(initial=0.0))
    if threshold is None:
        threshold = RELATIVE_SUPPORT_THRESHOLD * top
    positive = values > threshold
    if top <= 0.0 or not positive.any():
        return SupportSet(np.zeros((0, p)), widths, np.zeros((0, p)), np.zeros((0, p + 1)))

    cells = centers[positive]
    corners = _cell_corners(cells, widths)
    if p == 1:
        a, b = corners.min(), corners.max()
        vertices = np.array([[a], [b]])
        equations = np.array([[-1.0, a], [1.0, -b]])
    else:
        hull = ConvexHull(corners)
        vertices = corners[hull.vertices]
        equations = hull.equations
    return SupportSet(cells, widths, vertices, equations)


def field_to_frame(field: DensityField, resolution: int = 50) -> pd.DataFrame:
    """Density dump on a tensor grid over the field's box: y1..yp, value."""
    lo, hi = field.box
    centers, _ = _box_grid(lo, hi, resolution)
    return to_frame(centers, prefix="y", value=field.evaluate(centers))


def evaluate_along(field: DensityField, q: QuantileMap, u) -> np.ndarray:
    """f(q(u)) for u in U; an exact field of the same map skips the inversion."""
    if isinstance(field, ExactDensityField) and field.map is q:
        return field.evaluate_at_preimage(u)
    return field.evaluate(q.evaluate(u))


def gradient_along(field: DensityField, q: QuantileMap, u) -> np.ndarray:
    """grad f at q(u) for u in U."""
    if isinstance(field, ExactDensityField) and field.map is q:
        return field.gradient_at_preimage(u)
    return field.gradient(q.evaluate(u))
