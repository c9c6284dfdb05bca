"""
The measure-valued operator phi_z, its derivative, and the tools around it.

phi_z(q) has density sum_d f_{d,z}(q_d(u)) det Dq_d(u) on U. Its derivative in the
direction h = (h_d) is evaluated in the Piola-expanded form

    sum_d det(Dq_d) grad f_{d,z}(q_d)'h_d + f_{d,z}(q_d) <cof(Dq_d), Dh_d>

so only analytic quantities are needed. Signed measures live on quadrature grids and
are compared in total variation.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .densities import DensityField, evaluate_along, gradient_along
from .domain import QuadratureGrid, ReferenceDomain, ReferenceMeasure, build_grid
from .errors import NoDirectionsError, SingularMatrixError
from .transport import (
    ConvexPotential,
    QuadraticPotential,
    QuantileMap,
    SmoothMaxPotential,
    SumPotential,
    check_class_membership,
    potential_to_dict,
)
from .utils.array_ops import ensure_matrix_stack, to_frame
from .utils.batch_utils import run_ordered

logger = logging.getLogger(__name__)

DEFAULT_K = 10.0
ALPHA_MAX = 0.1
AUDIT_RESOLUTION = 24


# ============== Signed measures ==============

@dataclass(frozen=True, eq=False)
class SignedGridMeasure:
    """Finite signed measure with a density at the nodes of a quadrature grid."""

    grid: QuadratureGrid
    density: np.ndarray
    provenance: str = "exact"

    @property
    def total_mass(self) -> float:
        return self.grid.integrate(self.density)

    def __sub__(self, other: "SignedGridMeasure") -> "SignedGridMeasure":
        if other.grid is not self.grid and other.grid.size != self.grid.size:
            raise ValueError("Signed measures live on different grids")
        return SignedGridMeasure(self.grid, self.density - other.density, _merge(self.provenance, other.provenance))

    def scaled(self, factor: float) -> "SignedGridMeasure":
        return SignedGridMeasure(self.grid, factor * self.density, self.provenance)

    def to_frame(self) -> pd.DataFrame:
        """CSV layout: u1..up, weight, density."""
        return to_frame(self.grid.nodes, prefix="u", weight=self.grid.weights, density=self.density)


def _merge(a: str, b: str) -> str:
    return a if a == b else "finite-difference"


def tv_norm(measure: SignedGridMeasure) -> float:
    """Total variation: sum of weight * |density| (sup over |f| <= 1 is attained by f = sign)."""
    return float(np.dot(measure.grid.weights, np.abs(measure.density)))


def reference_on_grid(measure: ReferenceMeasure, grid: QuadratureGrid) -> SignedGridMeasure:
    """mu as a signed grid measure."""
    return SignedGridMeasure(grid, measure.density(grid.nodes))


# ============== Matrix utilities ==============

def cofactor(matrix) -> np.ndarray:
    """
    cof(M) = det(M) M^{-1} for a matrix or a stack of matrices.

    Raises:
        SingularMatrixError: some matrix has zero determinant
    """
    arr = np.asarray(matrix, dtype=float)
    stack = ensure_matrix_stack(arr)
    p = stack.shape[-1]
    det = np.linalg.det(stack)
    if np.any(det == 0.0) or not np.all(np.isfinite(det)):
        raise SingularMatrixError("Cofactor requested for a singular matrix")
    if p == 1:
        out = np.ones_like(stack)
    elif p == 2:
        out = np.empty_like(stack)
        out[:, 0, 0] = stack[:, 1, 1]
        out[:, 1, 1] = stack[:, 0, 0]
        out[:, 0, 1] = -stack[:, 0, 1]
        out[:, 1, 0] = -stack[:, 1, 0]
    else:
        out = det[:, None, None] * np.linalg.inv(stack)
    return out if arr.ndim > 2 else out[0]


def piola_residual(q: QuantileMap, grid: QuadratureGrid, step: float = 1e-2) -> float:
    """
    max over interior nodes and columns j of |sum_i d/du_i cof(Dq)_ij|, by central differences.

    Nodes closer than `step` to the boundary are left out.
    """
    nodes = grid.nodes[grid.interior_mask(step)]
    if nodes.shape[0] == 0:
        return 0.0
    p = nodes.shape[1]
    divergence = np.zeros((nodes.shape[0], p))
    for i in range(p):
        offset = np.zeros(p)
        offset[i] = step
        forward = cofactor(q.jacobians(nodes + offset))
        backward = cofactor(q.jacobians(nodes - offset))
        divergence += (forward[:, i, :] - backward[:, i, :]) / (2.0 * step)
    return float(np.abs(divergence).max())


# ============== Tangent directions ==============

def audit_points(domain: ReferenceDomain) -> np.ndarray:
    """Grid nodes plus boundary points, used to approximate sup norms on U."""
    resolution = AUDIT_RESOLUTION if domain.dimension <= 2 else 8
    return np.concatenate([build_grid(domain, resolution).nodes, domain.boundary_points(resolution)])


@dataclass(frozen=True, eq=False)
class TangentDirection:
    """h_d = scale * grad(psi_d): one gradient field per treatment."""

    potentials: tuple
    scale: float = 1.0
    alpha: float | None = None

    @property
    def treatments(self) -> int:
        return len(self.potentials)

    def field(self, d: int, points) -> np.ndarray:
        return self.scale * self.potentials[d].gradient(points)

    def jacobian(self, d: int, points) -> np.ndarray:
        return self.scale * self.potentials[d].hessian(points)

    def sup_norm(self, points) -> float:
        """max_d max_u |h_d(u)| over the given points."""
        return max(float(np.linalg.norm(self.field(d, points), axis=1).max()) for d in range(self.treatments))

    def derivative_norm(self, points) -> float:
        """max_d max_u of the spectral norm of Dh_d(u)."""
        return max(
            float(np.abs(np.linalg.eigvalsh(self.jacobian(d, points))).max()) for d in range(self.treatments)
        )

    @classmethod
    def normalized(cls, potentials, domain: ReferenceDomain) -> "TangentDirection":
        """Rescale so that max_d sup_U |h_d| = 1."""
        raw = cls(tuple(potentials))
        norm = raw.sup_norm(audit_points(domain))
        if norm <= 0.0:
            raise ValueError("Cannot normalize the zero direction")
        return cls(raw.potentials, 1.0 / norm)

    def to_dict(self) -> dict:
        return {
            "potentials": [potential_to_dict(psi) for psi in self.potentials],
            "scale": self.scale,
            "alpha": self.alpha,
        }


def zero_direction(dimension: int, treatments: int) -> TangentDirection:
    zero = QuadraticPotential(np.zeros((dimension, dimension)), strict=False)
    return TangentDirection((zero,) * treatments)


def perturb_maps(maps, direction: TangentDirection, alpha: float) -> tuple:
    """q* + alpha h as gradient maps of phi*_d + alpha * scale * psi_d."""
    return tuple(
        QuantileMap(SumPotential((q.potential, direction.potentials[d]), (1.0, alpha * direction.scale)), q.domain)
        for d, q in enumerate(maps)
    )


def mirrored_direction(maps, potential: ConvexPotential) -> TangentDirection:
    """h_0 = grad(psi), h_1 = -grad(psi); remaining treatments (if any) unperturbed."""
    domain = maps[0].domain
    potentials = [potential, SumPotential((potential,), (-1.0,))]
    zero = QuadraticPotential(np.zeros((domain.dimension, domain.dimension)), strict=False)
    potentials += [zero] * (len(maps) - 2)
    return TangentDirection.normalized(potentials, domain)


def _random_tangent_potential(domain: ReferenceDomain, rng: np.random.Generator, pieces: int) -> ConvexPotential:
    p = domain.dimension
    raw = rng.standard_normal((p, p))
    quadratic = QuadraticPotential(0.5 * (raw + raw.T), rng.standard_normal(p), strict=False)
    up = SmoothMaxPotential.random(domain, pieces, rng, kappa=0.0, slope_scale=0.5)
    down = SmoothMaxPotential.random(domain, pieces, rng, kappa=0.0, slope_scale=0.5)
    return SumPotential((quadratic, up, down), (1.0, 1.0, -1.0))


def admissible_step(maps, direction: TangentDirection, grid: QuadratureGrid, eigen_bounds: tuple,
                    alpha_max: float = ALPHA_MAX, halvings: int = 30) -> float | None:
    """Largest alpha = alpha_max / 2^k keeping every perturbed map inside the eigenvalue box."""
    lower, upper = eigen_bounds
    alpha = alpha_max
    for _ in range(halvings):
        perturbed = perturb_maps(maps, direction, alpha)
        if all(check_class_membership(q, grid, lower, upper).passed for q in perturbed):
            return alpha
        alpha *= 0.5
    return None


def sample_tangent(
    maps,
    K: float = DEFAULT_K,
    seed: int = 0,
    count: int = 20,
    eigen_bounds: tuple = (0.25, 4.0),
    alpha_max: float = ALPHA_MAX,
    grid: QuadratureGrid | None = None,
    pieces: int = 3,
    max_attempts: int | None = None,
) -> list[TangentDirection]:
    """
    Random admissible tangent directions.

    Each candidate is the gradient of a random potential difference (quadratic plus
    two smoothed maxima) per treatment, rescaled to unit sup norm. Candidates with
    |Dh_d| > K or without an admissible step in (0, alpha_max] are rejected.
    """
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    domain = maps[0].domain
    grid = grid or build_grid(domain, 12 if domain.dimension <= 2 else 5)
    audit = audit_points(domain)
    rng = np.random.default_rng(seed)
    max_attempts = max_attempts or 50 * count

    accepted, attempts, too_steep = [], 0, 0
    while len(accepted) < count and attempts < max_attempts:
        attempts += 1
        candidate = TangentDirection.normalized(
            [_random_tangent_potential(domain, rng, pieces) for _ in maps], domain
        )
        if candidate.derivative_norm(audit) > K:
            too_steep += 1
            continue
        alpha = admissible_step(maps, candidate, grid, eigen_bounds, alpha_max)
        if alpha is None:
            continue
        accepted.append(replace(candidate, alpha=alpha))

    if len(accepted) < count:
        logger.warning(
            "Tangent sampler accepted %d/%d after %d attempts (%d above K=%g)",
            len(accepted), count, attempts, too_steep, K,
        )
    return accepted


# ============== Operator and derivative ==============

def phi(maps, z: int, fields: dict, grid: QuadratureGrid) -> SignedGridMeasure:
    """Density sum_d f_{d,z}(q_d(u)) det Dq_d(u) at the grid nodes."""
    u = grid.nodes
    density = np.zeros(grid.size)
    for d, q in enumerate(maps):
        density += evaluate_along(fields[(d, z)], q, u) * np.linalg.det(q.jacobians(u))
    return SignedGridMeasure(grid, density, _field_provenance(fields, z, len(maps), "provenance"))


def _field_provenance(fields: dict, z: int, m: int, attribute: str) -> str:
    kinds = {getattr(fields[(d, z)], attribute) for d in range(m)}
    return "exact" if kinds == {"exact"} else "finite-difference"


def phi_prime(maps, direction: TangentDirection, z: int, fields: dict, grid: QuadratureGrid) -> SignedGridMeasure:
    """
    Derivative of phi_z at q in the direction h, in Piola-expanded form.

    The result is flagged 'finite-difference' when some field gradient is not analytic.
    """
    u = grid.nodes
    density = np.zeros(grid.size)
    for d, q in enumerate(maps):
        field: DensityField = fields[(d, z)]
        jac = q.jacobians(u)
        det = np.linalg.det(jac)
        transport_term = det * np.sum(gradient_along(field, q, u) * direction.field(d, u), axis=1)
        volume_term = evaluate_along(field, q, u) * np.einsum("nij,nij->n", cofactor(jac), direction.jacobian(d, u))
        density += transport_term + volume_term
    return SignedGridMeasure(grid, density, _field_provenance(fields, z, len(maps), "gradient_provenance"))


def divergence_form_density(maps, direction: TangentDirection, z: int, fields: dict, grid: QuadratureGrid,
                            step: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """
    Central-difference divergence of u -> sum_d f_{d,z}(q_d) cof(Dq_d) h_d.

    Returns (mask, density): the nodes at distance >= step from the boundary and the
    divergence there.
    """
    mask = grid.interior_mask(step)
    nodes = grid.nodes[mask]
    p = grid.dimension

    def flux(points):
        total = np.zeros_like(points)
        for d, q in enumerate(maps):
            f = evaluate_along(fields[(d, z)], q, points)
            total += f[:, None] * np.einsum("nij,nj->ni", cofactor(q.jacobians(points)), direction.field(d, points))
        return total

    divergence = np.zeros(nodes.shape[0])
    for i in range(p):
        offset = np.zeros(p)
        offset[i] = step
        divergence += (flux(nodes + offset)[:, i] - flux(nodes - offset)[:, i]) / (2.0 * step)
    return mask, divergence


def differentiability_gaps(maps, direction: TangentDirection, z: int, fields: dict, grid: QuadratureGrid,
                           epsilons=(1e-2, 1e-3)) -> list[float]:
    """TV gap between the slope (phi_z(q + eps h) - phi_z(q)) / eps and phi'_z(h), per eps."""
    base = phi(maps, z, fields, grid)
    derivative = phi_prime(maps, direction, z, fields, grid)
    gaps = []
    for eps in epsilons:
        moved = phi(perturb_maps(maps, direction, eps), z, fields, grid)
        gaps.append(tv_norm((moved - base).scaled(1.0 / eps) - derivative))
    return gaps


# ============== Probes ==============

@dataclass(frozen=True)
class ProbeReport:
    minimum: float
    index: int
    values: tuple
    direction: dict

    def to_dict(self) -> dict:
        return {"minimum": self.minimum, "index": self.index, "count": len(self.values), "direction": self.direction}


def instrument_values(fields: dict) -> list[int]:
    return sorted({z for _, z in fields})


def linearized_size(maps, direction: TangentDirection, fields: dict, grid: QuadratureGrid) -> float:
    """sum_z |phi'_z(h)|_TV."""
    return sum(tv_norm(phi_prime(maps, direction, z, fields, grid)) for z in instrument_values(fields))


def full_rank_probe(maps, fields: dict, grid: QuadratureGrid, directions, max_workers: int | None = None) -> ProbeReport:
    """
    Sampled lower-bound estimate of inf over directions of sum_z |phi'_z(h)|_TV.

    Raises:
        NoDirectionsError: empty direction list
    """
    directions = list(directions)
    if not directions:
        raise NoDirectionsError("full_rank_probe needs at least one tangent direction")
    values = run_ordered(lambda h: linearized_size(maps, h, fields, grid), directions, max_workers)
    index = int(np.argmin(values))
    logger.info("Full-rank probe: min %.6g over %d directions", values[index], len(values))
    return ProbeReport(float(values[index]), index, tuple(float(v) for v in values), directions[index].to_dict())


@dataclass(frozen=True)
class ConormalReport:
    min_inner_product: float
    passed: bool

    def to_dict(self) -> dict:
        return {"min_inner_product": self.min_inner_product, "passed": self.passed}


def conormal_sign_check(q: QuantileMap, center=None, resolution: int = 16) -> ConormalReport:
    """
    At boundary points u, (Dq(u))^{-1} n(u) must point out of q(U): its inner product
    with q(u) - c is nonnegative for c the barycenter of the image.
    """
    domain = q.domain
    points = domain.boundary_points(resolution, corners=False)
    if center is None:
        grid = build_grid(domain, resolution)
        center = np.average(q.evaluate(grid.nodes), axis=0, weights=grid.weights)
    conormal = np.linalg.solve(q.jacobians(points), domain.outward_normal(points)[..., None])[..., 0]
    inner = np.sum(conormal * (q.evaluate(points) - np.asarray(center)), axis=1)
    value = float(inner.min())
    return ConormalReport(value, bool(value >= -1e-12))
