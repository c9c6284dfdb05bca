"""
Structural models and the data simulator.

A model draws Z from the instrument law, a latent rank W ~ mu, the selection noise nu
from a finite-cell copula with W, potential ranks U_d (all equal to W under rank
invariance, exchangeable perturbations of W under rank similarity), D = delta(Z, nu)
and Y = q_D(U_D).
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import stats

from .domain import ReferenceMeasure, build_grid, perturb_ranks
from .errors import InvalidModelError, UnsupportedCouplingError
from .transport import (
    QuadraticPotential,
    QuantileMap,
    SmoothMaxPotential,
    check_class_membership,
    invert_points,
    potential_from_dict,
    potential_to_dict,
)
from .utils.array_ops import ensure_points, from_frame, to_frame
from .utils.batch_utils import (
    DEFAULT_CHUNK_SIZE,
    accumulate_results,
    chunk_slices,
    run_ordered,
    spawn_generators,
)

logger = logging.getLogger(__name__)

INVARIANCE = "invariance"
SIMILARITY = "similarity"
COUPLINGS = (INVARIANCE, SIMILARITY)
SUPPORTED_TREATMENTS = (2, 3)
DEFAULT_EIGEN_BOUNDS = (0.25, 4.0)


# ============== Treatment rule ==============

@dataclass(frozen=True, eq=False)
class TreatmentRule:
    """
    delta(z, nu): for each instrument value z, [0,1] is cut into labelled intervals.

    Interval j of instrument z is [thresholds[z, j], thresholds[z, j+1]) with label labels[z, j].
    """

    thresholds: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.thresholds, dtype=float)
        lab = np.asarray(self.labels, dtype=int)
        if th.ndim != 2 or lab.shape != (th.shape[0], th.shape[1] - 1):
            raise InvalidModelError(f"thresholds {th.shape} and labels {lab.shape} do not match")
        if not (np.allclose(th[:, 0], 0.0) and np.allclose(th[:, -1], 1.0)) or (np.diff(th, axis=1) < 0).any():
            raise InvalidModelError("Each row of thresholds must increase from 0 to 1")
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def compliance(cls, m: int, c: float) -> "TreatmentRule":
        """nu < c gives D = z; the rest of [0,1] is split evenly among the other labels."""
        if not 0.0 <= c <= 1.0:
            raise InvalidModelError(f"Compliance must lie in [0, 1], got {c}")
        rest = (1.0 - c) / (m - 1)
        thresholds, labels = [], []
        for z in range(m):
            others = [d for d in range(m) if d != z]
            thresholds.append(np.concatenate([[0.0, c], c + rest * np.arange(1, m)]))
            labels.append([z, *others])
        th = np.array(thresholds)
        th[:, -1] = 1.0
        return cls(th, np.array(labels))

    @classmethod
    def from_shares(cls, shares) -> "TreatmentRule":
        """Intervals of width shares[d, z] = P(D=d | Z=z) in label order, for nu ~ U[0,1]."""
        P = np.asarray(shares, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise InvalidModelError(f"Share matrix must be square, got {P.shape}")
        if (P < 0).any() or not np.allclose(P.sum(axis=0), 1.0):
            raise InvalidModelError("Each column of the share matrix must be a probability vector")
        m = P.shape[0]
        th = np.zeros((m, m + 1))
        th[:, 1:] = np.cumsum(P.T, axis=1)
        th[:, -1] = 1.0
        return cls(th, np.tile(np.arange(m), (m, 1)))

    @property
    def size(self) -> int:
        return self.thresholds.shape[0]

    def apply(self, z, nu) -> np.ndarray:
        z = np.asarray(z, dtype=int)
        nu = np.asarray(nu, dtype=float)
        d = np.empty(z.shape, dtype=int)
        for value in range(self.size):
            rows = z == value
            interval = np.searchsorted(self.thresholds[value], nu[rows], side="right") - 1
            interval = np.clip(interval, 0, self.labels.shape[1] - 1)
            d[rows] = self.labels[value, interval]
        return d

    def interval_mass(self, z: int, d: int, lo: float, hi: float) -> float:
        """Lebesgue measure of {nu in [lo, hi): delta(z, nu) = d}."""
        th = self.thresholds[z]
        overlap = np.clip(np.minimum(th[1:], hi) - np.maximum(th[:-1], lo), 0.0, None)
        return float(overlap[self.labels[z] == d].sum())

    def conditional_shares(self, copula: "NoiseCopula") -> np.ndarray:
        """P(D=d | Z=z, U-cell k) as an array indexed [k, d, z]."""
        m = self.size
        out = np.zeros((copula.cells, m, m))
        widths = np.diff(copula.band_edges)
        for z in range(m):
            for d in range(m):
                per_band = np.array([
                    self.interval_mass(z, d, lo, hi) / w if w > 0 else 0.0
                    for lo, hi, w in zip(copula.band_edges[:-1], copula.band_edges[1:], widths)
                ])
                out[:, d, z] = copula.band_weights @ per_band
        return out

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds.tolist(), "labels": self.labels.tolist()}


# ============== Noise copula ==============

@dataclass(frozen=True, eq=False)
class NoiseCopula:
    """
    Finite-cell coupling of nu with the latent rank.

    U-cells are intervals of the rank coordinate (U[0,1] under mu), nu-bands are
    intervals of [0,1]; band_weights[k, j] = P(nu in band j | U-cell k) and nu is
    uniform within its band.
    """

    cell_edges: np.ndarray
    band_edges: np.ndarray
    band_weights: np.ndarray

    def __post_init__(self):
        weights = np.atleast_2d(np.asarray(self.band_weights, dtype=float))
        cells = np.asarray(self.cell_edges, dtype=float)
        bands = np.asarray(self.band_edges, dtype=float)
        if weights.shape != (cells.size - 1, bands.size - 1):
            raise InvalidModelError(f"band_weights {weights.shape} does not match the cell/band edges")
        if (weights < 0).any() or not np.allclose(weights.sum(axis=1), 1.0):
            raise InvalidModelError("Rows of band_weights must be probability vectors")
        object.__setattr__(self, "cell_edges", cells)
        object.__setattr__(self, "band_edges", bands)
        object.__setattr__(self, "band_weights", weights)

    @classmethod
    def independent(cls) -> "NoiseCopula":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.ones((1, 1)))

    @classmethod
    def diagonal(cls, cells: int, strength: float) -> "NoiseCopula":
        """nu falls in the band matching the rank cell with extra probability `strength`; nu stays U[0,1]."""
        if not 0.0 <= strength <= 1.0:
            raise InvalidModelError(f"Copula strength must lie in [0, 1], got {strength}")
        edges = np.linspace(0.0, 1.0, cells + 1)
        weights = strength * np.eye(cells) + (1.0 - strength) / cells
        return cls(edges, edges.copy(), weights)

    @property
    def cells(self) -> int:
        return self.band_weights.shape[0]

    @property
    def is_independent(self) -> bool:
        return bool(np.allclose(self.band_weights, self.band_weights[0]))

    @property
    def cell_masses(self) -> np.ndarray:
        return np.diff(self.cell_edges)

    def cell_index(self, rank) -> np.ndarray:
        k = np.searchsorted(self.cell_edges, np.asarray(rank, dtype=float), side="right") - 1
        return np.clip(k, 0, self.cells - 1)

    def sample_nu(self, rank, rng: np.random.Generator) -> np.ndarray:
        k = self.cell_index(rank)
        cumulative = np.cumsum(self.band_weights, axis=1)[k]
        band = (rng.random(k.shape[0])[:, None] > cumulative).sum(axis=1)
        band = np.minimum(band, self.band_edges.size - 2)
        lo, hi = self.band_edges[band], self.band_edges[band + 1]
        return lo + (hi - lo) * rng.random(k.shape[0])

    def to_dict(self) -> dict:
        return {
            "cell_edges": self.cell_edges.tolist(),
            "band_edges": self.band_edges.tolist(),
            "band_weights": self.band_weights.tolist(),
        }


# ============== Model ==============

@dataclass(frozen=True, eq=False)
class StructuralModel:
    """Reference measure, one quantile map per treatment, instrument law, selection and rank coupling."""

    measure: ReferenceMeasure
    maps: tuple
    instrument_probs: np.ndarray
    rule: TreatmentRule
    copula: NoiseCopula = field(default_factory=NoiseCopula.independent)
    coupling: str = INVARIANCE
    similarity_scale: float = 0.25
    eigen_bounds: tuple = DEFAULT_EIGEN_BOUNDS
    family: str = "affine"
    membership_resolution: int = 16

    def __post_init__(self):
        maps = tuple(self.maps)
        m = len(maps)
        if m not in SUPPORTED_TREATMENTS:
            raise InvalidModelError(f"Supported numbers of treatments: {SUPPORTED_TREATMENTS}, got {m}")
        probs = np.asarray(self.instrument_probs, dtype=float)
        if probs.shape != (m,) or (probs < 0).any() or not np.isclose(probs.sum(), 1.0):
            raise InvalidModelError(f"Instrument law must be a probability vector of length {m}")
        if self.rule.size != m:
            raise InvalidModelError(f"Treatment rule covers {self.rule.size} instrument values, expected {m}")
        if self.coupling not in COUPLINGS:
            raise InvalidModelError(f"Unknown rank coupling '{self.coupling}'")
        lower, upper = self.eigen_bounds
        grid = build_grid(self.measure.domain, self.membership_resolution)
        for d, q in enumerate(maps):
            if q.domain != self.measure.domain:
                raise InvalidModelError(f"Map {d} lives on {q.domain}, the measure on {self.measure.domain}")
            report = check_class_membership(q, grid, lower, upper)
            if not report.passed:
                raise InvalidModelError(
                    f"Map {d} eigenvalues [{report.min_eigenvalue:.4g}, {report.max_eigenvalue:.4g}] "
                    f"leave the box ({lower}, {upper})"
                )
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "instrument_probs", probs)
        object.__setattr__(self, "eigen_bounds", (float(lower), float(upper)))

    @property
    def treatments(self) -> int:
        return len(self.maps)

    @property
    def dimension(self) -> int:
        return self.measure.dimension

    @cached_property
    def _conditional_shares(self) -> np.ndarray:
        return self.rule.conditional_shares(self.copula)

    def share_matrix(self) -> np.ndarray:
        """P(D=d | Z=z) indexed [d, z]."""
        return np.einsum("k,kdz->dz", self.copula.cell_masses, self._conditional_shares)

    def rank_weight(self, d: int, z: int, points) -> np.ndarray:
        """
        Density of (U_D, D=d) given Z=z at u: rho(u) * P(D=d | Z=z, U-cell of u).

        Raises:
            UnsupportedCouplingError: rank similarity with nu dependent on the ranks
        """
        if self.coupling == SIMILARITY and not self.copula.is_independent:
            raise UnsupportedCouplingError(
                "The law of U_d given (D, Z) has no closed form under rank similarity with a dependent copula"
            )
        u = ensure_points(points, self.dimension)
        k = self.copula.cell_index(self.measure.rank_coordinate(u))
        return self.measure.density(u) * self._conditional_shares[k, d, z]

    def to_dict(self) -> dict:
        return {
            "measure": self.measure.name,
            "dimension": self.dimension,
            "maps": [potential_to_dict(q.potential) for q in self.maps],
            "instrument_probs": self.instrument_probs.tolist(),
            "rule": self.rule.to_dict(),
            "copula": self.copula.to_dict(),
            "coupling": self.coupling,
            "similarity_scale": self.similarity_scale,
            "eigen_bounds": list(self.eigen_bounds),
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StructuralModel":
        dimension = int(payload["dimension"])
        if payload.get("measure", "uniform") == "uniform":
            measure = ReferenceMeasure.uniform_cube(dimension)
        else:
            measure = ReferenceMeasure.spherical_uniform(dimension)
        maps = tuple(QuantileMap(potential_from_dict(p), measure.domain) for p in payload["maps"])
        rule = TreatmentRule(np.asarray(payload["rule"]["thresholds"]), np.asarray(payload["rule"]["labels"]))
        copula_payload = payload.get("copula")
        copula = NoiseCopula(**copula_payload) if copula_payload else NoiseCopula.independent()
        return cls(
            measure=measure,
            maps=maps,
            instrument_probs=np.asarray(payload["instrument_probs"]),
            rule=rule,
            copula=copula,
            coupling=payload.get("coupling", INVARIANCE),
            similarity_scale=float(payload.get("similarity_scale", 0.25)),
            eigen_bounds=tuple(payload.get("eigen_bounds", DEFAULT_EIGEN_BOUNDS)),
            family=payload.get("family", "affine"),
        )


# ============== Observed data ==============

@dataclass(frozen=True, eq=False)
class ObservedSample:
    """Rows (Y, D, Z) with an optional latent annex for oracle checks."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    u: np.ndarray | None = None
    nu: np.ndarray | None = None
    potential_ranks: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dimension(self) -> int:
        return self.y.shape[1]

    @property
    def has_latent(self) -> bool:
        return self.u is not None

    def cell(self, d: int, z: int) -> np.ndarray:
        return self.y[(self.d == d) & (self.z == z)]

    def count(self, d: int, z: int) -> int:
        return int(np.count_nonzero((self.d == d) & (self.z == z)))

    def empirical_shares(self, treatments: int) -> np.ndarray:
        """Empirical P(D=d | Z=z) indexed [d, z]."""
        counts = np.zeros((treatments, treatments))
        np.add.at(counts, (self.d, self.z), 1.0)
        totals = counts.sum(axis=0)
        return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)

    def to_frame(self) -> pd.DataFrame:
        """CSV layout: y1..yp, d, z[, u1..up, nu]."""
        frame = to_frame(self.y, prefix="y", d=self.d, z=self.z)
        if self.has_latent:
            latent = to_frame(self.u, prefix="u", nu=self.nu)
            frame = pd.concat([frame, latent], axis=1)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ObservedSample":
        y = from_frame(frame, "y")
        u = from_frame(frame, "u") if "u1" in frame.columns else None
        nu = frame["nu"].to_numpy(dtype=float) if "nu" in frame.columns else None
        return cls(y, frame["d"].to_numpy(dtype=int), frame["z"].to_numpy(dtype=int), u, nu)


def _simulate_chunk(model: StructuralModel, size: int, rng: np.random.Generator) -> dict:
    m = model.treatments
    z = rng.choice(m, size=size, p=model.instrument_probs)
    w = model.measure.sample(size, rng)
    nu = model.copula.sample_nu(model.measure.rank_coordinate(w), rng)
    d = model.rule.apply(z, nu)

    if model.coupling == INVARIANCE:
        ranks = np.repeat(w[:, None, :], m, axis=1)
    else:
        ranks = np.stack(
            [perturb_ranks(model.measure, w, model.similarity_scale, rng) for _ in range(m)], axis=1
        )
    u = ranks[np.arange(size), d]
    y = np.empty_like(u)
    for label, q in enumerate(model.maps):
        rows = d == label
        y[rows] = q.evaluate(u[rows])
    return {"y": y, "d": d, "z": z, "u": u, "nu": nu, "ranks": ranks}


def simulate(
    model: StructuralModel,
    n: int,
    seed: int,
    keep_latent: bool = False,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    max_workers: int | None = None,
) -> ObservedSample:
    """
    Draw n observations from the model.

    Work is split into fixed-size chunks, each with its own stream spawned from the
    seed, so the output does not depend on max_workers.

    Args:
        model: Structural model
        n: Number of rows (>= 1)
        seed: Root seed
        keep_latent: Keep U, nu and the potential ranks
        chunk_size: Rows per chunk
        max_workers: Thread cap

    Returns:
        ObservedSample in chunk order
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    slices = chunk_slices(int(n), chunk_size)
    generators = spawn_generators(seed, len(slices))
    tasks = [(s.stop - s.start, rng) for s, rng in zip(slices, generators)]
    chunks = run_ordered(lambda task: _simulate_chunk(model, *task), tasks, max_workers)

    merged = None
    for chunk in chunks:
        merged = accumulate_results(merged, chunk)
    logger.info("Simulated %d rows in %d chunk(s)", n, len(slices))
    if keep_latent:
        return ObservedSample(merged["y"], merged["d"], merged["z"], merged["u"], merged["nu"], merged["ranks"])
    return ObservedSample(merged["y"], merged["d"], merged["z"])


# ============== Worked models ==============

def _spd(matrix, name: str) -> np.ndarray:
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.shape[0] != A.shape[1] or not np.allclose(A, A.T) or np.linalg.eigvalsh(A)[0] <= 0.0:
        raise InvalidModelError(f"{name} must be symmetric positive definite")
    return A


def example1_model(
    A0,
    A1,
    b0=None,
    b1=None,
    compliance: float = 0.9,
    eigen_bounds: tuple = DEFAULT_EIGEN_BOUNDS,
    instrument_probs=(0.5, 0.5),
    copula: NoiseCopula | None = None,
) -> StructuralModel:
    """
    Quasi-linear utility model: q_d(u) = A_d^{-1}(u - b_d) on the uniform cube.

    Two treatments, two instrument values, rank invariance and
    delta(z, nu) = z if nu < compliance else 1 - z.
    """
    A = [_spd(A0, "A_0"), _spd(A1, "A_1")]
    p = A[0].shape[0]
    if A[1].shape[0] != p:
        raise InvalidModelError("A_0 and A_1 must have the same size")
    shifts = [np.zeros(p) if b is None else np.asarray(b, dtype=float).reshape(p) for b in (b0, b1)]
    measure = ReferenceMeasure.uniform_cube(p)
    maps = []
    for A_d, b_d in zip(A, shifts):
        inverse = np.linalg.inv(A_d)
        inverse = 0.5 * (inverse + inverse.T)
        maps.append(QuantileMap(QuadraticPotential(inverse, -inverse @ b_d), measure.domain))
    return StructuralModel(
        measure=measure,
        maps=tuple(maps),
        instrument_probs=np.asarray(instrument_probs, dtype=float),
        rule=TreatmentRule.compliance(2, compliance),
        copula=copula or NoiseCopula.independent(),
        eigen_bounds=eigen_bounds,
        family="affine",
    )


def logit_potential(utilities) -> SmoothMaxPotential:
    """Social surplus log(1 + sum_j exp(u_j + delta_j)); its gradient is the vector of inside shares."""
    delta = np.asarray(utilities, dtype=float).reshape(-1)
    p = delta.shape[0]
    slopes = np.vstack([np.zeros((1, p)), np.eye(p)])
    intercepts = np.concatenate([[0.0], delta])
    return SmoothMaxPotential(slopes, intercepts, temperature=1.0, kappa=0.0)


def example2_model(
    utilities,
    outside_option: bool = True,
    compliance: float = 0.9,
    eigen_bounds: tuple = (0.02, 1.0),
    instrument_probs=(0.5, 0.5),
) -> StructuralModel:
    """
    Logit demand: s_d(u) = softargmax shares of p goods plus an outside option,
    with regime-specific mean utilities.

    Raises:
        InvalidModelError: outside_option is False (the share Jacobian is singular)
    """
    if not outside_option:
        raise InvalidModelError("Without an outside option the share Jacobian annihilates the all-ones vector")
    utilities = [np.asarray(v, dtype=float).reshape(-1) for v in utilities]
    if len(utilities) != 2 or utilities[0].shape != utilities[1].shape:
        raise InvalidModelError("Example 2 takes two mean-utility vectors of equal length")
    p = utilities[0].shape[0]
    measure = ReferenceMeasure.uniform_cube(p)
    maps = tuple(QuantileMap(logit_potential(v), measure.domain) for v in utilities)
    return StructuralModel(
        measure=measure,
        maps=maps,
        instrument_probs=np.asarray(instrument_probs, dtype=float),
        rule=TreatmentRule.compliance(2, compliance),
        eigen_bounds=eigen_bounds,
        family="utility",
    )


def identity_model(shares, dimension: int = 2, eigen_bounds: tuple = DEFAULT_EIGEN_BOUNDS) -> StructuralModel:
    """Identity structural maps with an arbitrary share matrix P(D=d | Z=z) (indexed [d, z])."""
    P = np.asarray(shares, dtype=float)
    m = P.shape[0]
    measure = ReferenceMeasure.uniform_cube(dimension)
    maps = tuple(QuantileMap(QuadraticPotential(np.eye(dimension)), measure.domain) for _ in range(m))
    return StructuralModel(
        measure=measure,
        maps=maps,
        instrument_probs=np.full(m, 1.0 / m),
        rule=TreatmentRule.from_shares(P),
        eigen_bounds=eigen_bounds,
        family="bend",
    )


def degenerate_model(dimension: int = 2, treatments: int = 2) -> StructuralModel:
    """Identity maps and an instrument carrying no information: P(D=d | Z=z) = 1/m for every z."""
    return identity_model(np.full((treatments, treatments), 1.0 / treatments), dimension)


def rank_violation_model(
    regularization: float = 0.1,
    identical: bool = False,
    compliance: float = 0.9,
    cells: int = 10,
    copula_strength: float = 0.8,
    eigen_bounds: tuple = (0.05, 2.0),
) -> StructuralModel:
    """
    q_0 = identity and q_1(u) = r*u + (1-r)*((u1+u2)/2)(1,1)' on [0,1]^2, with nu tied to u1.

    identical=True uses the identity for both treatments (the null case).
    """
    measure = ReferenceMeasure.uniform_cube(2)
    identity = QuadraticPotential(np.eye(2))
    mixed = QuadraticPotential(regularization * np.eye(2) + (1.0 - regularization) * 0.5 * np.ones((2, 2)))
    maps = (QuantileMap(identity, measure.domain), QuantileMap(identity if identical else mixed, measure.domain))
    return StructuralModel(
        measure=measure,
        maps=maps,
        instrument_probs=np.array([0.5, 0.5]),
        rule=TreatmentRule.compliance(2, compliance),
        copula=NoiseCopula.diagonal(cells, copula_strength),
        eigen_bounds=eigen_bounds,
        family="affine",
    )


# ============== Rank similarity demo ==============

@dataclass(frozen=True)
class RankViolationReport:
    component: int
    band_statistics: tuple
    band_critical_values: tuple
    max_statistic: float
    violation: bool
    rank_instrument_correlation: float
    n: int
    band_counts: tuple = ()
    band_alpha: float = 0.01

    def to_dict(self) -> dict:
        return {
            "component": self.component,
            "band_statistics": list(self.band_statistics),
            "band_critical_values": list(self.band_critical_values),
            "band_counts": list(self.band_counts),
            "band_alpha": self.band_alpha,
            "max_statistic": self.max_statistic,
            "violation": self.violation,
            "rank_instrument_correlation": self.rank_instrument_correlation,
            "n": self.n,
        }


def ks_critical_value(n1: int, n2: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample Kolmogorov-Smirnov critical value."""
    c = np.sqrt(-0.5 * np.log(alpha / 2.0))
    return float(c * np.sqrt((n1 + n2) / (n1 * n2)))


def rank_violation_demo(
    model: StructuralModel,
    n: int,
    seed: int,
    component: int = 0,
    alpha: float = 0.01,
    max_workers: int | None = None,
) -> RankViolationReport:
    """
    Scalar ranks of one outcome component and their law within nu-bands.

    The rank of treatment d is the marginal CDF of Y_d^F evaluated at q_d^F(U_d), using
    potential outcomes for all treatments. Within each nu-band of the copula the
    ranks of the two treatments are compared with a two-sample KS test at level
    alpha divided by the number of tested bands.
    """
    sample = simulate(model, n, seed, keep_latent=True, max_workers=max_workers)
    m = model.treatments
    component_values = np.column_stack([
        model.maps[d].evaluate(sample.potential_ranks[:, d, :])[:, component] for d in range(m)
    ])
    scalar_ranks = np.column_stack([
        stats.rankdata(component_values[:, d], method="average") / sample.n for d in range(m)
    ])

    edges = model.copula.band_edges
    if edges.size <= 2:
        edges = np.linspace(0.0, 1.0, 11)
    band = np.clip(np.searchsorted(edges, sample.nu, side="right") - 1, 0, edges.size - 2)
    counts = np.bincount(band, minlength=edges.size - 1)
    tested = [j for j in range(edges.size - 1) if counts[j] >= 2]
    band_alpha = alpha / max(len(tested), 1)
    statistics, critical = [], []
    for j in tested:
        rows = band == j
        result = stats.ks_2samp(scalar_ranks[rows, 0], scalar_ranks[rows, 1])
        statistics.append(float(result.statistic))
        critical.append(ks_critical_value(int(counts[j]), int(counts[j]), band_alpha))

    realised = scalar_ranks[np.arange(sample.n), sample.d]
    corr = float(np.corrcoef(realised, sample.z)[0, 1])
    violation = any(s > c for s, c in zip(statistics, critical))
    logger.info("Rank demo: max KS %.4f, corr(rank, Z) %.4f", max(statistics, default=0.0), corr)
    return RankViolationReport(
        component, tuple(statistics), tuple(critical), max(statistics, default=0.0), violation, corr, sample.n,
        band_counts=tuple(int(counts[j]) for j in tested), band_alpha=band_alpha,
    )


# ============== Rank law given the instrument ==============

@dataclass
class ImplicationReport:
    """|P(Y in q_D(B) | Z=z) - mu(B)| for every test set and instrument value."""

    rows: list
    max_gap: float
    max_ratio: float
    passed: bool

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_dict(self) -> dict:
        return {"max_gap": self.max_gap, "max_ratio": self.max_ratio, "passed": self.passed, "checked": len(self.rows)}


def recovered_ranks(model: StructuralModel, sample: ObservedSample) -> tuple[np.ndarray, np.ndarray]:
    """U_D = q_D^{-1}(Y) row by row, with a mask of rows that have a preimage."""
    u = np.zeros_like(sample.y)
    inside = np.zeros(sample.n, dtype=bool)
    for d, q in enumerate(model.maps):
        rows = sample.d == d
        if rows.any():
            u[rows], inside[rows] = invert_points(q, sample.y[rows])
    return u, inside


def implication_gaps(model: StructuralModel, sample: ObservedSample, sets, multiplier: float = 3.0) -> ImplicationReport:
    """
    Check that U_D given Z=z is distributed as mu on a finite family of sets.

    Each gap is compared with multiplier * sqrt(mu(B)(1 - mu(B)) / n_z), n_z the number
    of rows with Z=z.
    """
    u, inside = recovered_ranks(model, sample)
    if not inside.all():
        logger.warning("%d observed outcomes have no preimage under their treatment's map", int((~inside).sum()))
    rows = []
    for index, rank_set in enumerate(sets):
        mass = rank_set.mass(model.measure)
        hits = rank_set.contains(u)
        for z in range(model.treatments):
            in_z = sample.z == z
            n_z = int(in_z.sum())
            if n_z == 0:
                continue
            estimate = float(hits[in_z].mean())
            gap = abs(estimate - mass)
            bound = multiplier * np.sqrt(mass * (1.0 - mass) / n_z)
            rows.append({
                "set": index,
                "kind": rank_set.kind,
                "z": z,
                "n_z": n_z,
                "mu": mass,
                "estimate": estimate,
                "gap": gap,
                "bound": float(bound),
            })
    max_gap = max((r["gap"] for r in rows), default=0.0)
    ratios = [r["gap"] / r["bound"] if r["bound"] > 0 else (0.0 if r["gap"] == 0 else np.inf) for r in rows]
    max_ratio = float(max(ratios, default=0.0))
    passed = bool(max_ratio <= 1.0)
    logger.info("Implication check: max gap %.5f (%.2f of the bound) over %d cells", max_gap, max_ratio, len(rows))
    return ImplicationReport(rows, float(max_gap), max_ratio, passed)
