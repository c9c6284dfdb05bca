"""
Reference domains, reference measures and quadrature grids.

Two domains are supported: the unit cube [0,1]^p with the uniform measure, and the
unit ball with the spherical uniform measure (direction uniform on the sphere,
radius uniform on [0,1]).
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import pandas as pd
from scipy import special

from .errors import InvalidResolutionError, UnsupportedDomainError
from .utils.array_ops import ensure_points, frozen_copy, to_frame

logger = logging.getLogger(__name__)

UNIT_CUBE = "unit-cube"
UNIT_BALL = "unit-ball"
DOMAIN_KINDS = (UNIT_CUBE, UNIT_BALL)


# ============== Domains ==============

@dataclass(frozen=True)
class ReferenceDomain:
    """Compact convex set U with nonempty interior."""

    kind: str
    dimension: int

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"Unknown domain kind '{self.kind}' (expected one of {DOMAIN_KINDS})")
        if int(self.dimension) < 1:
            raise ValueError(f"Dimension must be positive, got {self.dimension}")

    @classmethod
    def cube(cls, dimension: int) -> "ReferenceDomain":
        return cls(UNIT_CUBE, dimension)

    @classmethod
    def ball(cls, dimension: int) -> "ReferenceDomain":
        return cls(UNIT_BALL, dimension)

    @property
    def is_cube(self) -> bool:
        return self.kind == UNIT_CUBE

    @property
    def volume(self) -> float:
        if self.is_cube:
            return 1.0
        p = self.dimension
        return float(np.pi ** (p / 2) / special.gamma(p / 2 + 1))

    @property
    def diameter(self) -> float:
        return float(np.sqrt(self.dimension)) if self.is_cube else 2.0

    @property
    def center(self) -> np.ndarray:
        return np.full(self.dimension, 0.5) if self.is_cube else np.zeros(self.dimension)

    def signed_distance(self, points) -> np.ndarray:
        """Signed Euclidean distance to the boundary: negative inside, positive outside."""
        u = ensure_points(points, self.dimension)
        if not self.is_cube:
            return np.linalg.norm(u, axis=1) - 1.0
        outside = np.linalg.norm(np.maximum(np.maximum(-u, u - 1.0), 0.0), axis=1)
        inside = np.minimum(u, 1.0 - u).min(axis=1)
        return np.where(outside > 0.0, outside, -inside)

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        return self.signed_distance(points) <= tol

    def project(self, points) -> np.ndarray:
        """Closest point of U."""
        u = ensure_points(points, self.dimension)
        if self.is_cube:
            return np.clip(u, 0.0, 1.0)
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        return u / np.maximum(norms, 1.0)

    def outward_normal(self, points) -> np.ndarray:
        """
        Unit outward normal at boundary points.

        On the cube the face nearest to each point is used, so points on an edge or
        corner get the normal of one of the faces meeting there.
        """
        u = ensure_points(points, self.dimension)
        if not self.is_cube:
            norms = np.linalg.norm(u, axis=1, keepdims=True)
            return u / np.where(norms > 0.0, norms, 1.0)

        gaps = np.concatenate([u, 1.0 - u], axis=1)
        nearest = np.argmin(gaps, axis=1)
        axis = nearest % self.dimension
        sign = np.where(nearest < self.dimension, -1.0, 1.0)
        normals = np.zeros_like(u)
        normals[np.arange(u.shape[0]), axis] = sign
        return normals

    def boundary_points(self, resolution: int, corners: bool = True) -> np.ndarray:
        """
        Deterministic sample of the boundary.

        Cube: midpoints of a resolution^(p-1) grid on every face, plus the 2^p corners.
        Ball: 4*resolution equally spaced angles in p=2, the two endpoints in p=1.
        """
        if resolution < 1:
            raise InvalidResolutionError(f"Boundary resolution must be >= 1, got {resolution}")
        p = self.dimension

        if not self.is_cube:
            if p == 1:
                return np.array([[-1.0], [1.0]])
            if p != 2:
                raise UnsupportedDomainError("Boundary sampling of the unit ball is available for p <= 2")
            angles = (np.arange(4 * resolution) + 0.5) * (2.0 * np.pi / (4 * resolution))
            return np.column_stack([np.cos(angles), np.sin(angles)])

        faces = []
        if p == 1:
            faces = [np.array([[0.0]]), np.array([[1.0]])]
        else:
            mids = (np.arange(resolution) + 0.5) / resolution
            mesh = np.stack(np.meshgrid(*([mids] * (p - 1)), indexing="ij"), axis=-1).reshape(-1, p - 1)
            for axis in range(p):
                for side in (0.0, 1.0):
                    face = np.insert(mesh, axis, side, axis=1)
                    faces.append(face)
        points = np.concatenate(faces, axis=0)
        if corners and p > 1:
            corner_pts = np.stack(np.meshgrid(*([[0.0, 1.0]] * p), indexing="ij"), axis=-1).reshape(-1, p)
            points = np.concatenate([points, corner_pts], axis=0)
        return points


# ============== Measures ==============

@dataclass(frozen=True)
class ReferenceMeasure:
    """Absolutely continuous probability measure mu with support U."""

    domain: ReferenceDomain

    @classmethod
    def uniform_cube(cls, dimension: int) -> "ReferenceMeasure":
        return cls(ReferenceDomain.cube(dimension))

    @classmethod
    def spherical_uniform(cls, dimension: int) -> "ReferenceMeasure":
        return cls(ReferenceDomain.ball(dimension))

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def name(self) -> str:
        return "uniform" if self.domain.is_cube else "spherical-uniform"

    @cached_property
    def _sphere_area(self) -> float:
        p = self.dimension
        return float(2.0 * np.pi ** (p / 2) / special.gamma(p / 2))

    def density(self, points) -> np.ndarray:
        """Lebesgue density of mu; zero outside U."""
        u = ensure_points(points, self.dimension)
        inside = self.domain.contains(u)
        if self.domain.is_cube:
            return inside.astype(float)
        radius = np.linalg.norm(u, axis=1)
        with np.errstate(divide="ignore"):
            values = 1.0 / (self._sphere_area * radius ** (self.dimension - 1))
        return np.where(inside, values, 0.0)

    def density_gradient(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        if self.domain.is_cube or self.dimension == 1:
            return np.zeros_like(u)
        p = self.dimension
        radius = np.linalg.norm(u, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            grad = -(p - 1) * u / (self._sphere_area * radius ** (p + 1))
        return np.where(self.domain.contains(u)[:, None], grad, 0.0)

    def rank_coordinate(self, points) -> np.ndarray:
        """Scalar coordinate that is U[0,1] under mu: u1 on the cube, the radius on the ball."""
        u = ensure_points(points, self.dimension)
        if self.domain.is_cube:
            return u[:, 0]
        return np.linalg.norm(u, axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.dimension
        if self.domain.is_cube:
            return rng.random((n, p))
        directions = rng.standard_normal((n, p))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return directions * rng.random((n, 1))


def sample_mu(measure: ReferenceMeasure, n: int, seed: int) -> np.ndarray:
    """
    Draw n i.i.d. points from mu.

    Args:
        measure: Reference measure
        n: Number of draws (>= 1)
        seed: Seed of the numpy Generator

    Returns:
        (n, p) array, bitwise-repeatable for a given seed
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return measure.sample(int(n), np.random.default_rng(seed))


def perturb_ranks(measure: ReferenceMeasure, points, scale: float, rng: np.random.Generator) -> np.ndarray:
    """
    Random perturbation of rank vectors that leaves mu invariant.

    Cube: shift by scale*U[-1,1] per coordinate, modulo 1. Ball: radius shifted modulo 1
    with the direction kept, plus a random rotation by up to scale*pi in p=2.
    """
    u = ensure_points(points, measure.dimension)
    n, p = u.shape
    if measure.domain.is_cube:
        return np.mod(u + scale * rng.uniform(-1.0, 1.0, size=(n, p)), 1.0)

    radius = np.linalg.norm(u, axis=1)
    direction = np.divide(u, radius[:, None], out=np.zeros_like(u), where=radius[:, None] > 0)
    direction[radius == 0] = rng.standard_normal((int((radius == 0).sum()), p))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    new_radius = np.mod(radius + scale * rng.uniform(-1.0, 1.0, size=n), 1.0)
    if p == 2:
        angle = scale * np.pi * rng.uniform(-1.0, 1.0, size=n)
        cos, sin = np.cos(angle), np.sin(angle)
        direction = np.column_stack([
            cos * direction[:, 0] - sin * direction[:, 1],
            sin * direction[:, 0] + cos * direction[:, 1],
        ])
    return direction * new_radius[:, None]


# ============== Quadrature ==============

@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Midpoint quadrature nodes on U; weights are Lebesgue cell volumes."""

    domain: ReferenceDomain
    nodes: np.ndarray
    weights: np.ndarray
    resolution: int

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, np.asarray(values, dtype=float)))

    def interior_mask(self, margin: float) -> np.ndarray:
        """Nodes at distance >= margin from the boundary."""
        return self.domain.signed_distance(self.nodes) <= -margin


def build_grid(domain: ReferenceDomain, resolution: int) -> QuadratureGrid:
    """
    Build the midpoint quadrature grid of U.

    Cube: tensor grid of resolution^p cells. Ball: resolution cells on [-1,1] for p=1;
    polar grid with resolution radial and 4*resolution angular cells for p=2, each
    weight the exact area of its annular sector.

    Args:
        domain: Reference domain
        resolution: Nodes per axis (>= 2)

    Returns:
        QuadratureGrid with nodes in lexicographic order
    """
    if resolution < 2:
        raise InvalidResolutionError(f"Grid resolution must be >= 2, got {resolution}")
    p = domain.dimension

    if domain.is_cube:
        mids = (np.arange(resolution) + 0.5) / resolution
        nodes = np.stack(np.meshgrid(*([mids] * p), indexing="ij"), axis=-1).reshape(-1, p)
        weights = np.full(nodes.shape[0], resolution ** (-float(p)))
    elif p == 1:
        nodes = (-1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution))[:, None]
        weights = np.full(resolution, 2.0 / resolution)
    elif p == 2:
        n_theta = 4 * resolution
        dr = 1.0 / resolution
        dtheta = 2.0 * np.pi / n_theta
        radii = (np.arange(resolution) + 0.5) * dr
        angles = (np.arange(n_theta) + 0.5) * dtheta
        rr, tt = np.meshgrid(radii, angles, indexing="ij")
        nodes = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
        # midpoint radius times dr is the exact area of the sector
        weights = (rr * dr * dtheta).ravel()
    else:
        raise UnsupportedDomainError(f"No quadrature rule for the unit ball with p={p}; use the cube")

    logger.debug("Built %s grid: p=%d, resolution=%d, %d nodes", domain.kind, p, resolution, nodes.shape[0])
    return QuadratureGrid(domain, frozen_copy(nodes), frozen_copy(weights), int(resolution))


def measure_of_set(
    measure: ReferenceMeasure,
    indicator: Callable[[np.ndarray], np.ndarray],
    grid: QuadratureGrid,
) -> float:
    """
    Quadrature approximation of mu(B).

    Args:
        measure: Reference measure
        indicator: Vectorized predicate mapping (N, p) points to (N,) booleans
        grid: Quadrature grid on the measure's domain

    Returns:
        Probability in [0, 1]
    """
    inside = np.asarray(indicator(grid.nodes), dtype=bool)
    return grid.integrate(measure.density(grid.nodes) * inside)


def grid_to_frame(grid: QuadratureGrid) -> pd.DataFrame:
    """Grid dump: u1..up then weight."""
    return to_frame(grid.nodes, prefix="u", weight=grid.weights)


def points_to_frame(points, weights=None) -> pd.DataFrame:
    """Sample dump: u1..up then weight (equal weights when omitted)."""
    points = ensure_points(points)
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return to_frame(points, prefix="u", weight=weights)


# ============== Test sets ==============

BOX = "box"
HALF_SPACE = "half-space"


@dataclass(frozen=True, eq=False)
class RankSet:
    """Measurable subset B of U: an axis box [lo, hi] or a half-space {u : a'u <= b}."""

    kind: str
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    normal: np.ndarray | None = None
    offset: float = 0.0

    @classmethod
    def box(cls, lo, hi) -> "RankSet":
        lo, hi = np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or (lo > hi).any():
            raise ValueError(f"Box needs lo <= hi of equal length, got {lo.tolist()} and {hi.tolist()}")
        return cls(BOX, lo=lo, hi=hi)

    @classmethod
    def half_space(cls, normal, offset: float) -> "RankSet":
        return cls(HALF_SPACE, normal=np.atleast_1d(np.asarray(normal, dtype=float)), offset=float(offset))

    @classmethod
    def from_dict(cls, payload: dict) -> "RankSet":
        if payload["kind"] == BOX:
            return cls.box(payload["lo"], payload["hi"])
        if payload["kind"] == HALF_SPACE:
            return cls.half_space(payload["normal"], payload["offset"])
        raise ValueError(f"Unknown set kind: {payload['kind']!r}")

    @property
    def dimension(self) -> int:
        return (self.lo if self.kind == BOX else self.normal).shape[0]

    def contains(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        if self.kind == BOX:
            return np.all((u >= self.lo) & (u <= self.hi), axis=1)
        return u @ self.normal <= self.offset

    def mass(self, measure: "ReferenceMeasure", resolution: int | None = None) -> float:
        """mu(B): exact for boxes under the uniform cube measure, quadrature otherwise."""
        if self.kind == BOX and measure.domain.is_cube:
            return float(np.prod(np.clip(self.hi, 0.0, 1.0) - np.clip(self.lo, 0.0, 1.0)))
        if resolution is None:
            resolution = 400 if measure.dimension <= 2 else 16
        return measure_of_set(measure, self.contains, build_grid(measure.domain, resolution))

    def to_dict(self) -> dict:
        if self.kind == BOX:
            return {"kind": BOX, "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        return {"kind": HALF_SPACE, "normal": self.normal.tolist(), "offset": self.offset}


def default_rank_sets(domain: ReferenceDomain) -> list[RankSet]:
    """Eight boxes and four half-space cuts spread over U."""
    p = domain.dimension
    ones = np.ones(p)
    intervals = [(0.0, 0.5), (0.5, 1.0), (0.25, 0.75), (0.0, 0.3), (0.6, 1.0), (0.1, 0.9), (0.2, 0.6), (0.4, 0.8)]
    if domain.is_cube:
        boxes = [RankSet.box(a * ones, b * ones) for a, b in intervals]
        center = 0.5
    else:
        boxes = [RankSet.box((2 * a - 1) * ones, (2 * b - 1) * ones) for a, b in intervals]
        center = 0.0
    first = np.eye(p)[0]
    last = np.eye(p)[-1]
    alternating = np.where(np.arange(p) % 2 == 0, 1.0, -1.0)
    diagonal = ones / np.sqrt(p)
    cuts = [
        RankSet.half_space(first, center),
        RankSet.half_space(diagonal, diagonal @ (center * ones) + 0.1),
        RankSet.half_space(last, center - 0.2),
        RankSet.half_space(alternating, alternating @ (center * ones)),
    ]
    return boxes + cuts
