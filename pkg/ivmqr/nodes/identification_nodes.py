"""
Identification commands for ivmqr.

Audit the sufficient conditions for local identification on exact or estimated
densities.
"""

import numpy as np
import pandas as pd

from ..densities import identify_support
from ..domain import build_grid
from ..identification import (
    PairGrid,
    b_matrix_sweep,
    check_condition_12,
    check_mlr,
    check_pd_matrix_p1,
    quadratic_form_min,
    sufficient_share_condition,
)
from ..utils.array_ops import to_frame
from ..utils.config_parser import build_fields

DENSITY_OPTIONS = ["exact", "kernel"]


class CheckIdentification:
    """
    Worst-case margins of the identification conditions.

    Binary treatments get the positive-correlation condition and the monotone
    likelihood ratio (plus the 2x2 matrix condition when p = 1); every model gets the
    weighted block condition over a sweep of b matrices. One summary line per
    checked condition.
    """

    @classmethod
    def CONFIG_TYPES(cls):
        return {
            "required": {
                "model": ("MODEL", {}),
            },
            "optional": {
                "densities": (DENSITY_OPTIONS, {"default": "exact"}),
                "n": ("INT", {"default": 100_000, "min": 1}),
                "bandwidth": ("FLOAT", {"default": 0.0, "min": 0.0}),
                "pair_resolution": ("INT", {"default": 50, "min": 2, "max": 400}),
                "grid_resolution": ("INT", {"default": 16, "min": 2, "max": 200}),
                "relabel": ("BOOLEAN", {"default": False}),
                "density_bounds": ("FLOAT_LIST", {}),
                "quadratic_form_points": ("INT", {"default": 100, "min": 0}),
            },
        }

    RETURN_NAMES = ("report", "tables", "summary", "passed")
    FUNCTION = "check"
    CATEGORY = "ivmqr/Identification"

    def check(
        self,
        model,
        seed: int,
        densities: str = "exact",
        n: int = 100_000,
        bandwidth: float = 0.0,
        pair_resolution: int = 50,
        grid_resolution: int = 16,
        relabel: bool = False,
        density_bounds=None,
        quadratic_form_points: int = 100,
        sample=None,
        max_workers=None,
        **_,
    ):
        fields = build_fields(model, densities, n, seed, bandwidth, sample, max_workers)
        m, p = model.treatments, model.dimension
        lower, upper = model.eigen_bounds
        supports = [identify_support([fields[(d, z)] for z in range(m)]) for d in range(m)]

        reports = []
        if m == 2:
            pairs = PairGrid.from_supports(supports[0], supports[1], pair_resolution)
            quad = (fields[(0, 0)], fields[(0, 1)], fields[(1, 0)], fields[(1, 1)])
            reports.append(check_condition_12(*quad, lower, upper, p, pairs, max_workers))
            reports.append(check_mlr(*quad, pairs, max_workers))
            if p == 1:
                reports.append(check_pd_matrix_p1(*quad, pairs, relabel, max_workers))
            if density_bounds:
                if len(density_bounds) != 2:
                    raise ValueError("density_bounds takes [m, M]")
                reports.append(sufficient_share_condition(model.share_matrix(), tuple(density_bounds), lower, upper, p))

        grid = build_grid(model.measure.domain, grid_resolution)
        sweep = b_matrix_sweep(model.share_matrix(), fields, model.maps, grid)
        reports.append(sweep.reports[sweep.best])

        report = {
            "conditions": {r.name: r.to_dict() for r in reports},
            "b_sweep": sweep.to_dict(),
            "eigen_bounds": [lower, upper],
            "supports": [s.to_dict() | {"box": [b.tolist() for b in s.box]} for s in supports],
        }
        if quadratic_form_points > 0:
            report["quadratic_form"] = self._quadratic_forms(model, fields, grid, quadratic_form_points, seed)

        tables = {
            "conditions": pd.DataFrame([
                {"name": r.name, "margin": r.margin, "passed": r.passed, "checked": r.checked, "skipped": r.skipped}
                for r in reports
            ]),
            "supports": pd.concat(
                [to_frame(s.cells, prefix="y", d=np.full(s.cells.shape[0], d)) for d, s in enumerate(supports)],
                ignore_index=True,
            ),
        }
        summary = [r.summary_line() for r in reports]
        return (report, tables, summary, all(r.passed for r in reports))

    @staticmethod
    def _quadratic_forms(model, fields, grid, count: int, seed: int) -> dict:
        """Exact and sampled minima of the block quadratic form at random interior nodes."""
        rng = np.random.default_rng(seed)
        interior = grid.nodes[grid.interior_mask(1e-6)]
        picks = interior[rng.choice(interior.shape[0], size=min(count, interior.shape[0]), replace=False)]
        results = [quadratic_form_min(model.maps, fields, u, samples=2_000, seed=seed) for u in picks]
        exact = [r.exact_min for r in results]
        worst = int(np.argmin(exact))
        return {
            "points": len(results),
            "exact_min": float(exact[worst]),
            "sampled_min": float(min(r.sampled_min for r in results)),
            "location": picks[worst].tolist(),
        }


COMMAND_CLASS_MAPPINGS = {
    "check-identification": CheckIdentification,
}

COMMAND_DISPLAY_NAME_MAPPINGS = {
    "check-identification": "Check Identification Conditions",
}
