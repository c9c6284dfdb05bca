"""
Checkers for the identification conditions.

Every checker returns a ConditionReport whose margin is the worst case of LHS - RHS
over the checked points; a report passes iff its margin is positive. Nonsymmetric
matrices are judged in the quadratic-form sense, through their symmetric part.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .densities import DensityField, SupportSet, evaluate_along
from .domain import QuadratureGrid
from .errors import DimensionError, InvalidBError
from .utils.array_ops import min_eigenvalues
from .utils.batch_utils import chunk_slices, run_ordered

logger = logging.getLogger(__name__)

PAIR_RESOLUTION = 50
PAIR_CHUNK_ROWS = 256


# ============== Reports ==============

@dataclass
class ConditionReport:
    """Worst-case margin of one identification condition."""

    name: str
    margin: float
    location: list | None
    passed: bool
    resolution: int | None = None
    provenance: str = "exact"
    checked: int = 0
    skipped: int = 0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "margin": self.margin,
            "location": self.location,
            "passed": self.passed,
            "resolution": self.resolution,
            "provenance": self.provenance,
            "checked": self.checked,
            "skipped": self.skipped,
            "details": self.details,
        }

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}: {status} margin={self.margin:.6g} ({self.provenance}, {self.checked} checked)"


def _report(name, margin, location, resolution, provenance, checked, skipped=0, **details) -> ConditionReport:
    margin = float(margin)
    return ConditionReport(name, margin, location, bool(margin > 0.0), resolution, provenance, checked, skipped, details)


def _provenance(*fields: DensityField) -> str:
    kinds = sorted({f.provenance for f in fields})
    return kinds[0] if len(kinds) == 1 else "+".join(kinds)


# ============== Pair grids ==============

@dataclass(frozen=True, eq=False)
class PairGrid:
    """Points y0 in Y_0 and y1 in Y_1; the checked pairs are their Cartesian product."""

    y0: np.ndarray
    y1: np.ndarray
    resolution: int

    @property
    def dimension(self) -> int:
        return self.y0.shape[1]

    @property
    def size(self) -> int:
        return self.y0.shape[0] * self.y1.shape[0]

    @classmethod
    def from_supports(cls, support0: SupportSet, support1: SupportSet, resolution: int = PAIR_RESOLUTION) -> "PairGrid":
        """Tensor grids over each support's box, keeping points inside the support hull."""
        return cls(_support_points(support0, resolution), _support_points(support1, resolution), resolution)

    @classmethod
    def from_box(cls, lo, hi, resolution: int = PAIR_RESOLUTION) -> "PairGrid":
        lo, hi = np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float))
        points = _tensor_points(lo, hi, resolution)
        return cls(points, points.copy(), resolution)


def _tensor_points(lo: np.ndarray, hi: np.ndarray, resolution: int) -> np.ndarray:
    axes = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution for i in range(lo.shape[0])]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.shape[0])


def _support_points(support: SupportSet, resolution: int) -> np.ndarray:
    if support.empty:
        return np.zeros((0, support.dimension))
    lo, hi = support.box
    points = _tensor_points(lo, hi, resolution)
    return points[support.contains(points)]


# ============== Pointwise margins ==============

def condition_12_margin(f00, f01, f10, f11, ratio: float, p: int) -> np.ndarray:
    """4 f00 f11 - ratio^(p+1) (f01 + f10)^2, elementwise with broadcasting."""
    return 4.0 * f00 * f11 - ratio ** (p + 1) * (f01 + f10) ** 2


def mlr_margin(f00, f01, f10, f11) -> np.ndarray:
    """f11 f00 - f10 f01: positive iff f11/f01 > f10/f00 when the denominators are positive."""
    return f11 * f00 - f10 * f01


def symmetrized_min_eigenvalue(f00, f01, f10, f11) -> np.ndarray:
    """Smallest eigenvalue of the symmetric part of [[f00, f01], [f10, f11]]."""
    off = 0.5 * (f01 + f10)
    return 0.5 * (f00 + f11) - np.sqrt((0.5 * (f00 - f11)) ** 2 + off ** 2)


def _pairwise_min(values0: dict, values1: dict, margin_fn, skip_fn, max_workers: int | None):
    """
    Min of margin_fn over all (i, j) pairs, skipping pairs flagged by skip_fn.

    Rows are processed in chunks; ties resolve to the first pair in row-major order.
    """
    n0 = next(iter(values0.values())).shape[0]
    n1 = next(iter(values1.values())).shape[0]
    if n0 == 0 or n1 == 0:
        return np.inf, None, 0, 0

    def chunk(rows: slice):
        a = {k: v[rows, None] for k, v in values0.items()}
        b = {k: v[None, :] for k, v in values1.items()}
        margin = margin_fn(a, b)
        skip = skip_fn(a, b)
        margin = np.where(skip, np.inf, np.broadcast_to(margin, skip.shape))
        flat = int(np.argmin(margin))
        return float(margin.ravel()[flat]), flat, int(skip.sum()), skip.size, rows.start

    results = run_ordered(chunk, chunk_slices(n0, PAIR_CHUNK_ROWS), max_workers)
    best, best_index, skipped, total = np.inf, None, 0, 0
    for value, flat, n_skip, size, start in results:
        skipped += n_skip
        total += size
        if value < best:
            best, best_index = value, (start + flat // n1, flat % n1)
    return best, best_index, total - skipped, skipped


def _field_values(fields: dict, pairs: PairGrid) -> tuple[dict, dict]:
    values0 = {"f00": fields["f00"].evaluate(pairs.y0), "f01": fields["f01"].evaluate(pairs.y0)}
    values1 = {"f10": fields["f10"].evaluate(pairs.y1), "f11": fields["f11"].evaluate(pairs.y1)}
    return values0, values1


def _location(pairs: PairGrid, index) -> list | None:
    if index is None:
        return None
    i, j = index
    return [pairs.y0[i].tolist(), pairs.y1[j].tolist()]


def _all_zero(a, b):
    return (a["f00"] == 0) & (a["f01"] == 0) & (b["f10"] == 0) & (b["f11"] == 0)


# ============== Binary conditions ==============

def check_condition_12(
    f00: DensityField,
    f01: DensityField,
    f10: DensityField,
    f11: DensityField,
    lower: float,
    upper: float,
    p: int,
    pairs: PairGrid,
    max_workers: int | None = None,
) -> ConditionReport:
    """
    4 f00(y0) f11(y1) > (upper/lower)^(p+1) (f01(y0) + f10(y1))^2 over the pair grid.

    Pairs where all four densities vanish are skipped.
    """
    if not 0.0 < lower < upper:
        raise ValueError(f"Eigenvalue bounds must satisfy 0 < lower < upper, got ({lower}, {upper})")
    ratio = upper / lower
    fields = {"f00": f00, "f01": f01, "f10": f10, "f11": f11}
    values0, values1 = _field_values(fields, pairs)
    margin, index, checked, skipped = _pairwise_min(
        values0,
        values1,
        lambda a, b: condition_12_margin(a["f00"], a["f01"], b["f10"], b["f11"], ratio, p),
        _all_zero,
        max_workers,
    )
    report = _report(
        "condition-12", margin, _location(pairs, index), pairs.resolution, _provenance(*fields.values()),
        checked, skipped, ratio=ratio, factor=ratio ** (p + 1), dimension=p,
    )
    logger.info(report.summary_line())
    return report


def check_mlr(
    f00: DensityField,
    f01: DensityField,
    f10: DensityField,
    f11: DensityField,
    pairs: PairGrid,
    max_workers: int | None = None,
) -> ConditionReport:
    """
    Monotone likelihood ratio f11(y1)/f01(y0) > f10(y1)/f00(y0), in product form.

    Pairs with a zero denominator are skipped and counted; with nothing checked the
    margin is +inf.
    """
    fields = {"f00": f00, "f01": f01, "f10": f10, "f11": f11}
    values0, values1 = _field_values(fields, pairs)
    margin, index, checked, skipped = _pairwise_min(
        values0,
        values1,
        lambda a, b: mlr_margin(a["f00"], a["f01"], b["f10"], b["f11"]),
        lambda a, b: np.broadcast_to((a["f00"] <= 0) | (a["f01"] <= 0), (a["f00"].shape[0], b["f10"].shape[1])),
        max_workers,
    )
    return _report("mlr", margin, _location(pairs, index), pairs.resolution, _provenance(*fields.values()), checked, skipped)


def check_pd_matrix_p1(
    f00: DensityField,
    f01: DensityField,
    f10: DensityField,
    f11: DensityField,
    pairs: PairGrid,
    relabel: bool = False,
    max_workers: int | None = None,
) -> ConditionReport:
    """
    Positive definiteness of F = [[f00(y0), f01(y0)], [f10(y1), f11(y1)]] for p = 1.

    With relabel, a failing F is retried with its columns swapped (instrument values
    exchanged); the report records which labelling passed.
    """
    if pairs.dimension != 1 or f00.dimension != 1:
        raise DimensionError("The 2x2 matrix condition applies to scalar outcomes (p = 1)")
    fields = {"f00": f00, "f01": f01, "f10": f10, "f11": f11}
    values0, values1 = _field_values(fields, pairs)

    def run(swap: bool):
        if swap:
            a_keys, b_keys = ("f01", "f00"), ("f11", "f10")
        else:
            a_keys, b_keys = ("f00", "f01"), ("f10", "f11")
        return _pairwise_min(
            values0,
            values1,
            lambda a, b: symmetrized_min_eigenvalue(a[a_keys[0]], a[a_keys[1]], b[b_keys[0]], b[b_keys[1]]),
            _all_zero,
            max_workers,
        )

    margin, index, checked, skipped = run(False)
    relabeled = False
    if relabel and not margin > 0.0:
        swapped = run(True)
        if swapped[0] > 0.0:
            margin, index, checked, skipped = swapped
            relabeled = True
    return _report(
        "pd-matrix-p1", margin, _location(pairs, index), pairs.resolution, _provenance(*fields.values()),
        checked, skipped, relabeled=relabeled,
    )


def sufficient_share_condition(shares, density_bounds: tuple, lower: float, upper: float, p: int) -> ConditionReport:
    """
    Share-level sufficient condition for condition 12 when the conditional outcome
    densities lie in [m, M]:

        P00 P11 / (P01 + P10)^2 > (M^2 / (4 m^2)) (upper/lower)^(p+1)

    with Pdz = P(D=d | Z=z).
    """
    P = np.asarray(shares, dtype=float)
    low, high = density_bounds
    if not 0.0 < low <= high:
        raise ValueError(f"Density bounds must satisfy 0 < m <= M, got {density_bounds}")
    off = P[0, 1] + P[1, 0]
    lhs = np.inf if off == 0 else P[0, 0] * P[1, 1] / off ** 2
    rhs = high ** 2 / (4.0 * low ** 2) * (upper / lower) ** (p + 1)
    return _report("sufficient-shares", lhs - rhs, None, None, "shares", 1, lhs=lhs, rhs=rhs)


# ============== Block forms ==============

def _block_form(weights: np.ndarray, maps, u: np.ndarray) -> np.ndarray:
    """
    Assemble the (m p) x (m p) block matrices at nodes u.

    weights[n, r, d] multiplies det(Dq_d) (Dq_d)^{-1} in block (r, d).
    """
    m = len(maps)
    p = u.shape[1]
    blocks = np.zeros((u.shape[0], m * p, m * p))
    for d, q in enumerate(maps):
        jac = q.jacobians(u)
        cof = np.linalg.det(jac)[:, None, None] * np.linalg.inv(jac)
        for r in range(m):
            blocks[:, r * p:(r + 1) * p, d * p:(d + 1) * p] = weights[:, r, d, None, None] * cof
    return blocks


def _density_at_maps(fields: dict, maps, u: np.ndarray) -> np.ndarray:
    """values[n, d, z] = f_{d,z}(q_d(u_n))."""
    m = len(maps)
    out = np.zeros((u.shape[0], m, m))
    for d, q in enumerate(maps):
        for z in range(m):
            out[:, d, z] = evaluate_along(fields[(d, z)], q, u)
    return out


@dataclass(frozen=True)
class QuadraticFormReport:
    sampled_min: float
    exact_min: float
    direction: list

    def to_dict(self) -> dict:
        return {"sampled_min": self.sampled_min, "exact_min": self.exact_min, "direction": self.direction}


def quadratic_form_min(
    maps,
    fields: dict,
    u,
    samples: int = 10_000,
    seed: int = 0,
) -> QuadraticFormReport:
    """
    Minimum over unit (xi_0, ..., xi_{m-1}) of
    sum_{d,z} f_{d,z}(q_d(u)) det(Dq_d(u)) xi_z' (Dq_d(u))^{-1} xi_d.

    Returns both a sampled minimum over random unit directions and the exact minimum
    (smallest eigenvalue of the symmetric part of the block form).
    """
    u = np.asarray(u, dtype=float).reshape(1, -1)
    densities = _density_at_maps(fields, maps, u)
    # block (z, d) carries f_{d,z}
    block = _block_form(np.swapaxes(densities, 1, 2), maps, u)[0]
    sym = 0.5 * (block + block.T)
    exact = float(np.linalg.eigvalsh(sym)[0])

    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((samples, sym.shape[0]))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    values = np.einsum("ni,ij,nj->n", xi, sym, xi)
    best = int(np.argmin(values))
    return QuadraticFormReport(float(values[best]), exact, xi[best].tolist())


def check_general_condition(
    b,
    fields: dict,
    maps,
    grid: QuadratureGrid,
) -> ConditionReport:
    """
    Weighted block condition for m treatments: block (d', d) is
    (sum_z b[d', z] f_{d,z}(q_d(u))) det(Dq_d(u)) (Dq_d(u))^{-1}; the margin is the
    smallest eigenvalue of its symmetric part over the grid nodes.
    """
    m = len(maps)
    B = np.asarray(b, dtype=float)
    if B.shape != (m, m):
        raise InvalidBError(f"b must be {m}x{m}, got {B.shape}")
    u = grid.nodes
    densities = _density_at_maps(fields, maps, u)
    weights = np.einsum("rz,ndz->nrd", B, densities)
    eig = min_eigenvalues(_block_form(weights, maps, u))
    index = int(np.argmin(eig))
    provenance = _provenance(*fields.values())
    return _report(
        "general-condition", eig[index], u[index].tolist(), grid.resolution, provenance, u.shape[0], b=B.tolist(),
    )


@dataclass
class SweepResult:
    reports: dict
    best: str

    def to_dict(self) -> dict:
        return {"best": self.best, "reports": {name: r.to_dict() for name, r in self.reports.items()}}


def b_matrix_sweep(shares, fields: dict, maps, grid: QuadratureGrid) -> SweepResult:
    """
    Try b in {I, inverse of the transposed share matrix, row-normalised transposed share matrix}.

    No claim of completeness: the best margin found is reported.
    """
    P = np.asarray(shares, dtype=float)
    m = P.shape[0]
    candidates = {"identity": np.eye(m)}
    if abs(np.linalg.det(P)) > 1e-12:
        candidates["inverse-share"] = np.linalg.inv(P.T)
    rows = P.T.sum(axis=1, keepdims=True)
    candidates["row-normalised-share"] = P.T / np.where(rows > 0, rows, 1.0)
    reports = {name: check_general_condition(b, fields, maps, grid) for name, b in candidates.items()}
    best = max(reports, key=lambda name: reports[name].margin)
    return SweepResult(reports, best)
