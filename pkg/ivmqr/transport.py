"""
Convex potentials, multivariate quantile maps and discrete optimal transport.

A quantile map is the gradient of a convex potential, so its derivative is the
potential's Hessian and is symmetric by construction. Potentials come from a few
certified-convex families:

- QuadraticPotential: 1/2 u'Au + b'u + c
- SmoothMaxPotential: t * logsumexp((S u + c) / t) + kappa * |u|^2
- BendPotential: separable cubic bend, convex once added to 1/2 |u|^2 with |beta| < 1
- SumPotential: weighted sums (nonnegative weights keep convexity)
"""

import logging
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import ot
import pandas as pd
from scipy import special
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .domain import QuadratureGrid, ReferenceDomain, build_grid
from .errors import (
    BoundaryDerivativeWarning,
    DomainViolationError,
    InvalidCycleError,
    InvalidModelError,
    NoPreimageError,
    SizeMismatchError,
    UnsupportedDomainError,
)
from .utils.array_ops import ensure_points, frozen_copy, min_eigenvalues

logger = logging.getLogger(__name__)

DEFAULT_KAPPA = 1e-3
EXACT_OT_LIMIT = 2000
SINKHORN_REG_SCALE = 0.01
SINKHORN_MAX_ITER = 10_000
LEGENDRE_TOL = 1e-10
LEGENDRE_MAX_ITER = 500
PREIMAGE_TOL = 1e-8


# ============== Potentials ==============

class ConvexPotential(ABC):
    """Scalar potential on R^p with analytic derivatives up to third order."""

    kind: str = ""
    dimension: int

    @property
    def is_convex(self) -> bool:
        return True

    @abstractmethod
    def value(self, points) -> np.ndarray: ...

    @abstractmethod
    def gradient(self, points) -> np.ndarray: ...

    @abstractmethod
    def hessian(self, points) -> np.ndarray: ...

    @abstractmethod
    def third_derivative(self, points) -> np.ndarray: ...

    @abstractmethod
    def to_dict(self) -> dict: ...


@dataclass(frozen=True, eq=False)
class QuadraticPotential(ConvexPotential):
    """phi(u) = 1/2 u'Au + b'u + c. A must be SPD unless strict is False."""

    matrix: np.ndarray
    shift: np.ndarray | None = None
    constant: float = 0.0
    strict: bool = True
    kind = "quadratic"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise InvalidModelError(f"Quadratic potential needs a square matrix, got {A.shape}")
        if np.max(np.abs(A - A.T), initial=0.0) > 1e-12:
            raise InvalidModelError("Quadratic potential matrix must be symmetric")
        if self.strict and min_eigenvalues(A)[0] <= 0.0:
            raise InvalidModelError("Quadratic potential matrix must be positive definite")
        b = np.zeros(A.shape[0]) if self.shift is None else np.asarray(self.shift, dtype=float).reshape(-1)
        if b.shape[0] != A.shape[0]:
            raise InvalidModelError(f"Shift has length {b.shape[0]}, expected {A.shape[0]}")
        object.__setattr__(self, "matrix", frozen_copy(A))
        object.__setattr__(self, "shift", frozen_copy(b))

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_convex(self) -> bool:
        return bool(min_eigenvalues(self.matrix)[0] >= 0.0)

    def value(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        return 0.5 * np.einsum("ni,ij,nj->n", u, self.matrix, u) + u @ self.shift + self.constant

    def gradient(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        return u @ self.matrix + self.shift

    def hessian(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        return np.broadcast_to(self.matrix, (u.shape[0], *self.matrix.shape)).copy()

    def third_derivative(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        p = self.dimension
        return np.zeros((u.shape[0], p, p, p))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "matrix": self.matrix.tolist(),
            "shift": self.shift.tolist(),
            "constant": float(self.constant),
            "strict": bool(self.strict),
        }


@dataclass(frozen=True, eq=False)
class SmoothMaxPotential(ConvexPotential):
    """
    Smoothed maximum of affine pieces plus a strictly convex quadratic term.

    phi(u) = t * logsumexp((S u + c) / t) + kappa * |u|^2
    """

    slopes: np.ndarray
    intercepts: np.ndarray
    temperature: float
    kappa: float = DEFAULT_KAPPA
    kind = "smooth-max"

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.slopes, dtype=float))
        c = np.asarray(self.intercepts, dtype=float).reshape(-1)
        if c.shape[0] != S.shape[0]:
            raise InvalidModelError(f"{S.shape[0]} slopes but {c.shape[0]} intercepts")
        if self.temperature <= 0.0:
            raise InvalidModelError(f"Temperature must be positive, got {self.temperature}")
        if self.kappa < 0.0:
            raise InvalidModelError(f"kappa must be nonnegative, got {self.kappa}")
        object.__setattr__(self, "slopes", frozen_copy(S))
        object.__setattr__(self, "intercepts", frozen_copy(c))

    @classmethod
    def random(
        cls,
        domain: ReferenceDomain,
        pieces: int,
        rng: np.random.Generator,
        temperature: float | None = None,
        kappa: float = DEFAULT_KAPPA,
        slope_scale: float = 1.0,
    ) -> "SmoothMaxPotential":
        """Random pieces with Gaussian slopes; temperature defaults to 0.1 * diam(U)."""
        if temperature is None:
            temperature = 0.1 * domain.diameter
        slopes = slope_scale * rng.standard_normal((pieces, domain.dimension))
        intercepts = 0.1 * rng.standard_normal(pieces)
        return cls(slopes, intercepts, temperature, kappa)

    @property
    def dimension(self) -> int:
        return self.slopes.shape[1]

    def _weights(self, u: np.ndarray) -> np.ndarray:
        return special.softmax((u @ self.slopes.T + self.intercepts) / self.temperature, axis=1)

    def value(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        z = (u @ self.slopes.T + self.intercepts) / self.temperature
        return self.temperature * special.logsumexp(z, axis=1) + self.kappa * np.sum(u * u, axis=1)

    def gradient(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        return self._weights(u) @ self.slopes + 2.0 * self.kappa * u

    def hessian(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        w = self._weights(u)
        mean = w @ self.slopes
        second = np.einsum("nk,ki,kj->nij", w, self.slopes, self.slopes)
        cov = second - np.einsum("ni,nj->nij", mean, mean)
        return cov / self.temperature + 2.0 * self.kappa * np.eye(self.dimension)

    def third_derivative(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        w = self._weights(u)
        centered = self.slopes[None, :, :] - (w @ self.slopes)[:, None, :]
        return np.einsum("nk,nki,nkj,nkl->nijl", w, centered, centered, centered) / self.temperature ** 2

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "slopes": self.slopes.tolist(),
            "intercepts": self.intercepts.tolist(),
            "temperature": float(self.temperature),
            "kappa": float(self.kappa),
        }


@dataclass(frozen=True, eq=False)
class BendPotential(ConvexPotential):
    """
    Separable cubic bend sum_i beta_i (u_i^2/2 - u_i^3/3).

    Its gradient beta_i u_i (1 - u_i) vanishes on the cube's faces in coordinate i, so
    identity + bend maps [0,1]^p onto itself. Not convex on its own.
    """

    betas: np.ndarray
    kind = "bend"

    def __post_init__(self):
        object.__setattr__(self, "betas", frozen_copy(np.asarray(self.betas, dtype=float).reshape(-1)))

    @property
    def dimension(self) -> int:
        return self.betas.shape[0]

    @property
    def is_convex(self) -> bool:
        return False

    def value(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        return (self.betas * (u ** 2 / 2.0 - u ** 3 / 3.0)).sum(axis=1)

    def gradient(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        return self.betas * u * (1.0 - u)

    def hessian(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        diag = self.betas * (1.0 - 2.0 * u)
        out = np.zeros((u.shape[0], self.dimension, self.dimension))
        idx = np.arange(self.dimension)
        out[:, idx, idx] = diag
        return out

    def third_derivative(self, points) -> np.ndarray:
        u = ensure_points(points, self.dimension)
        p = self.dimension
        out = np.zeros((u.shape[0], p, p, p))
        idx = np.arange(p)
        out[:, idx, idx, idx] = -2.0 * self.betas
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.betas.tolist()}


@dataclass(frozen=True, eq=False)
class SumPotential(ConvexPotential):
    """Weighted sum of potentials. Negative weights are allowed for tangent directions."""

    parts: tuple
    weights: tuple = field(default=())
    kind = "sum"

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise InvalidModelError("SumPotential needs at least one part")
        weights = tuple(float(w) for w in self.weights) if self.weights else (1.0,) * len(parts)
        if len(weights) != len(parts):
            raise InvalidModelError(f"{len(parts)} parts but {len(weights)} weights")
        dims = {part.dimension for part in parts}
        if len(dims) != 1:
            raise InvalidModelError(f"Parts have different dimensions: {sorted(dims)}")
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "weights", weights)

    @property
    def dimension(self) -> int:
        return self.parts[0].dimension

    @property
    def is_convex(self) -> bool:
        return all(w >= 0.0 and part.is_convex for part, w in zip(self.parts, self.weights))

    def _combine(self, method: str, points):
        total = None
        for part, w in zip(self.parts, self.weights):
            term = w * getattr(part, method)(points)
            total = term if total is None else total + term
        return total

    def value(self, points) -> np.ndarray:
        return self._combine("value", points)

    def gradient(self, points) -> np.ndarray:
        return self._combine("gradient", points)

    def hessian(self, points) -> np.ndarray:
        return self._combine("hessian", points)

    def third_derivative(self, points) -> np.ndarray:
        return self._combine("third_derivative", points)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "parts": [part.to_dict() for part in self.parts],
            "weights": list(self.weights),
        }


def potential_to_dict(potential: ConvexPotential) -> dict:
    """JSON payload of a potential: a 'kind' tag plus its numeric parameters."""
    return potential.to_dict()


def potential_from_dict(payload: dict) -> ConvexPotential:
    """Rebuild a potential from potential_to_dict output."""
    kind = payload.get("kind")
    if kind == QuadraticPotential.kind:
        return QuadraticPotential(
            np.asarray(payload["matrix"], dtype=float),
            np.asarray(payload.get("shift"), dtype=float) if payload.get("shift") is not None else None,
            float(payload.get("constant", 0.0)),
            bool(payload.get("strict", True)),
        )
    if kind == SmoothMaxPotential.kind:
        return SmoothMaxPotential(
            np.asarray(payload["slopes"], dtype=float),
            np.asarray(payload["intercepts"], dtype=float),
            float(payload["temperature"]),
            float(payload.get("kappa", DEFAULT_KAPPA)),
        )
    if kind == BendPotential.kind:
        return BendPotential(np.asarray(payload["betas"], dtype=float))
    if kind == SumPotential.kind:
        return SumPotential(
            tuple(potential_from_dict(part) for part in payload["parts"]),
            tuple(payload.get("weights", ())),
        )
    raise ValueError(f"Unknown potential kind: {kind!r}")


# ============== Quantile maps ==============

@dataclass(frozen=True, eq=False)
class QuantileMap:
    """q = grad(phi) restricted to the reference domain."""

    potential: ConvexPotential
    domain: ReferenceDomain

    def __post_init__(self):
        if self.potential.dimension != self.domain.dimension:
            raise InvalidModelError(
                f"Potential has dimension {self.potential.dimension}, domain has {self.domain.dimension}"
            )

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    def evaluate(self, points) -> np.ndarray:
        return self.potential.gradient(ensure_points(points, self.dimension))

    def jacobians(self, points) -> np.ndarray:
        return self.potential.hessian(ensure_points(points, self.dimension))

    @cached_property
    def image_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box containing q(U); extremes of q(U) are attained on q(boundary)."""
        resolution = 64 if self.dimension <= 2 else 12
        images = self.evaluate(self.domain.boundary_points(resolution))
        span = images.max(axis=0) - images.min(axis=0)
        pad = 1e-9 * np.maximum(span, 1.0)
        return images.min(axis=0) - pad, images.max(axis=0) + pad

    @cached_property
    def _lookup(self) -> tuple[np.ndarray, cKDTree]:
        resolution = {1: 256, 2: 48, 3: 12}.get(self.dimension, 6)
        try:
            nodes = build_grid(self.domain, resolution).nodes
        except UnsupportedDomainError:
            nodes = self.domain.center[None, :]
        return nodes, cKDTree(self.evaluate(nodes))

    def initial_guess(self, ys: np.ndarray) -> np.ndarray:
        """Grid node whose image is nearest to each target."""
        nodes, tree = self._lookup
        _, idx = tree.query(ys)
        return nodes[idx].copy()


def _check_inside(domain: ReferenceDomain, u: np.ndarray):
    if not domain.contains(u).all():
        raise DomainViolationError(f"Point(s) outside {domain.kind}: {u[~domain.contains(u)][:3].tolist()}")


def eval_map(q: QuantileMap, u) -> np.ndarray:
    """
    Evaluate q(u) = grad(phi)(u).

    Args:
        q: Quantile map
        u: Point (p,) or batch (N, p) in U

    Returns:
        Same shape as u
    """
    arr = np.asarray(u, dtype=float)
    points = ensure_points(arr, q.dimension)
    _check_inside(q.domain, points)
    out = q.evaluate(points)
    return out[0] if arr.ndim <= 1 else out


def jacobian(q: QuantileMap, u) -> np.ndarray:
    """
    Dq(u), the Hessian of the potential.

    Boundary points get the one-sided value (the potentials are smooth on all of R^p)
    and a BoundaryDerivativeWarning.
    """
    arr = np.asarray(u, dtype=float)
    points = ensure_points(arr, q.dimension)
    _check_inside(q.domain, points)
    if (q.domain.signed_distance(points) > -1e-12).any():
        warnings.warn("Jacobian evaluated on the boundary of U (one-sided value)", BoundaryDerivativeWarning, stacklevel=2)
    out = q.jacobians(points)
    return out[0] if arr.ndim <= 1 else out


@dataclass(frozen=True)
class MembershipReport:
    min_eigenvalue: float
    max_eigenvalue: float
    passed: bool

    def to_dict(self) -> dict:
        return {"min_eigenvalue": self.min_eigenvalue, "max_eigenvalue": self.max_eigenvalue, "passed": self.passed}


def check_class_membership(q: QuantileMap, grid: QuadratureGrid, lower: float, upper: float) -> MembershipReport:
    """Pass iff every eigenvalue of Dq at every grid node lies strictly inside (lower, upper)."""
    if not 0.0 < lower < upper:
        raise ValueError(f"Eigenvalue bounds must satisfy 0 < lower < upper, got ({lower}, {upper})")
    eig = np.linalg.eigvalsh(q.jacobians(grid.nodes))
    lo, hi = float(eig[:, 0].min()), float(eig[:, -1].max())
    return MembershipReport(lo, hi, bool(lo > lower and hi < upper))


@dataclass(frozen=True)
class CycleReport:
    min_cycle_sum: float
    strict: bool
    sums: tuple

    def to_dict(self) -> dict:
        return {"min_cycle_sum": self.min_cycle_sum, "strict": self.strict, "count": len(self.sums)}


def cyclical_monotonicity_check(q: QuantileMap, cycles) -> CycleReport:
    """
    Evaluate sum_i (u^{i+1})'(q(u^{i+1}) - q(u^i)) over closed cycles.

    strict is True when every non-degenerate cycle has a positive sum and every
    degenerate cycle (all points equal) has sum 0.
    """
    sums = []
    strict = True
    for cycle in cycles:
        pts = np.asarray(cycle, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 2 or not np.array_equal(pts[0], pts[-1]):
            raise InvalidCycleError("A cycle needs at least two points and must end where it starts")
        pts = ensure_points(pts, q.dimension)
        _check_inside(q.domain, pts)
        images = q.evaluate(pts)
        total = float(np.sum(pts[1:] * (images[1:] - images[:-1])))
        sums.append(total)
        degenerate = bool(np.all(pts == pts[0]))
        strict = strict and (total == 0.0 if degenerate else total > 0.0)
    return CycleReport(min(sums) if sums else float("inf"), strict, tuple(sums))


# ============== Inversion ==============

def _closed_form_inverse(potential: ConvexPotential) -> np.ndarray | None:
    if isinstance(potential, QuadraticPotential) and np.linalg.cond(potential.matrix) < 1e12:
        return potential.matrix
    return None


def _newton(potential: ConvexPotential, ys: np.ndarray, start: np.ndarray, domain: ReferenceDomain | None,
            tol: float, max_iter: int) -> np.ndarray:
    """
    Projected ascent on u'y - phi(u) along damped Newton directions with backtracking.

    With a domain every iterate is projected onto it; without one the ascent is
    unconstrained.
    """
    u = start.copy()
    n, p = u.shape
    active = np.ones(n, dtype=bool)
    eye = np.eye(p)

    def objective(points, targets):
        return np.sum(points * targets, axis=1) - potential.value(points)

    for _ in range(max_iter):
        residual = ys[active] - potential.gradient(u[active])
        done = np.linalg.norm(residual, axis=1) <= tol
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
        idx, residual = idx[~done], residual[~done]
        current = u[idx]
        hess = potential.hessian(current)
        scale = np.maximum(np.abs(hess).max(axis=(1, 2)), 1.0)
        step = np.linalg.solve(hess + 1e-12 * scale[:, None, None] * eye, residual[..., None])[..., 0]
        base = objective(current, ys[idx])
        t = np.ones(idx.shape[0])
        accepted = np.zeros(idx.shape[0], dtype=bool)
        candidate = current.copy()
        for _ in range(40):
            pending = ~accepted
            if not pending.any():
                break
            trial = current[pending] + t[pending, None] * step[pending]
            if domain is not None:
                trial = domain.project(trial)
            better = objective(trial, ys[idx[pending]]) >= base[pending]
            moved = np.flatnonzero(pending)[better]
            candidate[moved] = trial[better]
            accepted[moved] = True
            t[pending & ~accepted] *= 0.5
        stalled = ~accepted | (np.linalg.norm(candidate - current, axis=1) <= 1e-16)
        u[idx] = candidate
        active[idx[stalled]] = False
    return u


def invert_points(q: QuantileMap, ys, tol: float = LEGENDRE_TOL, max_iter: int = LEGENDRE_MAX_ITER):
    """
    Batched Legendre inversion of q on U.

    Quadratic potentials are inverted in closed form; other potentials by projected
    Newton ascent on u'y - phi(u), which is concave.

    Args:
        q: Quantile map
        ys: (N, p) targets
        tol: Gradient-norm stopping threshold
        max_iter: Iteration cap

    Returns:
        (u, inside): preimages (N, p) and a mask of targets with a preimage in U
    """
    ys = ensure_points(ys, q.dimension)
    if ys.shape[0] == 0:
        return np.zeros_like(ys), np.zeros(0, dtype=bool)
    matrix = _closed_form_inverse(q.potential)
    if matrix is not None:
        u = np.linalg.solve(matrix, (ys - q.potential.shift).T).T
        return u, q.domain.contains(u, tol=1e-12)
    u = _newton(q.potential, ys, q.initial_guess(ys), q.domain, tol, max_iter)
    inside = np.linalg.norm(q.evaluate(u) - ys, axis=1) <= PREIMAGE_TOL
    return u, inside


def solve_gradient(potential: ConvexPotential, ys, start=None, tol: float = LEGENDRE_TOL,
                   max_iter: int = LEGENDRE_MAX_ITER) -> np.ndarray:
    """Unconstrained inverse of grad(phi) on R^p (used to pull points back across the boundary)."""
    ys = ensure_points(ys, potential.dimension)
    matrix = _closed_form_inverse(potential)
    if matrix is not None:
        return np.linalg.solve(matrix, (ys - potential.shift).T).T
    start = ys.copy() if start is None else ensure_points(start, potential.dimension).copy()
    return _newton(potential, ys, start, None, tol, max_iter)


def legendre_invert(q: QuantileMap, y, tol: float = LEGENDRE_TOL, max_iter: int = LEGENDRE_MAX_ITER) -> np.ndarray:
    """
    Preimage of a single point: argmax over U of u'y - phi(u).

    Raises:
        NoPreimageError: y is not in q(U)
    """
    u, inside = invert_points(q, np.asarray(y, dtype=float).reshape(1, -1), tol, max_iter)
    if not inside[0]:
        raise NoPreimageError(f"Point {np.asarray(y).tolist()} is outside the image of the map")
    return u[0]


@dataclass(frozen=True)
class BijectivityReport:
    max_roundtrip_error: float
    min_image_distance: float
    injective: bool
    passed: bool

    def to_dict(self) -> dict:
        return {
            "max_roundtrip_error": self.max_roundtrip_error,
            "min_image_distance": self.min_image_distance,
            "injective": self.injective,
            "passed": self.passed,
        }


def bijectivity_probe(q: QuantileMap, grid: QuadratureGrid, tol: float = 1e-7) -> BijectivityReport:
    """Round trip every interior node through q and its inverse; check distinct nodes keep distinct images."""
    nodes = grid.nodes[grid.interior_mask(1e-12)]
    if nodes.shape[0] == 0:
        logger.warning("Bijectivity check on a grid with no interior nodes")
        return BijectivityReport(float("inf"), 0.0, False, False)
    images = q.evaluate(nodes)
    back, _ = invert_points(q, images)
    error = float(np.linalg.norm(back - nodes, axis=1).max())
    if nodes.shape[0] > 1:
        distances, _ = cKDTree(images).query(images, k=2)
        min_distance = float(distances[:, 1].min())
    else:
        min_distance = float("inf")
    injective = min_distance > 1e-12
    return BijectivityReport(error, min_distance, injective, bool(injective and error <= tol))


# ============== Discrete transport ==============

@dataclass(frozen=True, eq=False)
class DiscreteTransportPlan:
    """Coupling between two equal-size samples under quadratic cost."""

    source: np.ndarray
    target: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    cost: float
    method: str
    regularization: float | None = None

    @property
    def assignment(self) -> np.ndarray:
        """Target index for each source point (row-wise argmax for entropic plans)."""
        n = self.source.shape[0]
        best = np.full(n, -1)
        top = np.full(n, -np.inf)
        for r, c, w in zip(self.rows, self.cols, self.weights):
            if w > top[r]:
                top[r], best[r] = w, c
        return best

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.source.shape[0]
        return (
            np.bincount(self.rows, weights=self.weights, minlength=n),
            np.bincount(self.cols, weights=self.weights, minlength=n),
        )


def brenier_from_samples(
    source,
    target,
    exact_limit: int = EXACT_OT_LIMIT,
    reg_scale: float = SINKHORN_REG_SCALE,
    max_iter: int = SINKHORN_MAX_ITER,
) -> DiscreteTransportPlan:
    """
    Optimal coupling of two samples under the cost |u - y|^2.

    Exact assignment up to exact_limit points, log-domain Sinkhorn above it with
    regularization reg_scale * mean cost.

    Args:
        source: (n, p) points
        target: (n, p) points

    Returns:
        DiscreteTransportPlan with cost sum_i |u_i - y_sigma(i)|^2
    """
    source = ensure_points(source)
    target = ensure_points(target, source.shape[1])
    n = source.shape[0]
    if target.shape[0] != n:
        raise SizeMismatchError(f"Source has {n} points, target has {target.shape[0]}")
    if n < 1:
        raise SizeMismatchError("Samples must be nonempty")

    cost_matrix = cdist(source, target, metric="sqeuclidean")
    if n <= exact_limit:
        rows, cols = linear_sum_assignment(cost_matrix)
        weights = np.full(n, 1.0 / n)
        cost = float(cost_matrix[rows, cols].sum())
        return DiscreteTransportPlan(source, target, rows, cols, weights, cost, "assignment")

    reg = reg_scale * float(cost_matrix.mean())
    logger.warning("n=%d above %d: using entropic transport (reg=%.3g)", n, exact_limit, reg)
    marginal = np.full(n, 1.0 / n)
    plan = ot.sinkhorn(marginal, marginal, cost_matrix, reg, method="sinkhorn_log", numItermax=max_iter)
    rows, cols = np.nonzero(plan > 1e-12 * plan.max())
    weights = plan[rows, cols]
    cost = float(n * np.sum(plan * cost_matrix))
    return DiscreteTransportPlan(source, target, rows, cols, weights, cost, "sinkhorn", reg)


def transport_plan_to_frame(plan: DiscreteTransportPlan) -> pd.DataFrame:
    """Plan dump: source index, target index, weight, cost contribution."""
    diff = plan.source[plan.rows] - plan.target[plan.cols]
    n = plan.source.shape[0]
    return pd.DataFrame({
        "source": plan.rows,
        "target": plan.cols,
        "weight": plan.weights,
        "cost": n * plan.weights * np.sum(diff * diff, axis=1),
    })
