"""
Linearization commands for ivmqr.

Derivative checks of the operator phi at the true maps, the full-rank probe of its
linearization and the finite-radius local uniqueness table.
"""

import numpy as np
import pandas as pd

from ..domain import build_grid
from ..linearization import (
    ALPHA_MAX,
    DEFAULT_K,
    conormal_sign_check,
    differentiability_gaps,
    divergence_form_density,
    full_rank_probe,
    instrument_values,
    phi,
    phi_prime,
    piola_residual,
    reference_on_grid,
    sample_tangent,
)
from ..solver import local_uniqueness_probe, probe_directions_for
from ..utils.config_parser import build_fields

ZERO_TOLERANCE = 1e-8


class Linearize:
    """
    Compare difference quotients of phi_z against phi'_z along sampled directions.

    Also reports the Piola identity residual, the divergence-form cross-check and
    the conormal sign check for every true map.
    """

    @classmethod
    def CONFIG_TYPES(cls):
        return {
            "required": {
                "model": ("MODEL", {}),
            },
            "optional": {
                "directions": ("INT", {"default": 20, "min": 1}),
                "K": ("FLOAT", {"default": DEFAULT_K, "min": 0.0}),
                "alpha_max": ("FLOAT", {"default": ALPHA_MAX, "min": 0.0}),
                "epsilons": ("FLOAT_LIST", {"default": [1e-2, 1e-3]}),
                "piola_steps": ("FLOAT_LIST", {"default": [1e-2, 5e-3]}),
                "grid_resolution": ("INT", {"default": 30, "min": 2, "max": 400}),
                "divergence_step": ("FLOAT", {"default": 1e-4, "min": 0.0}),
            },
        }

    RETURN_NAMES = ("report", "tables", "summary", "passed")
    FUNCTION = "linearize"
    CATEGORY = "ivmqr/Linearization"

    def linearize(
        self,
        model,
        seed: int,
        directions: int = 20,
        K: float = DEFAULT_K,
        alpha_max: float = ALPHA_MAX,
        epsilons=(1e-2, 1e-3),
        piola_steps=(1e-2, 5e-3),
        grid_resolution: int = 30,
        divergence_step: float = 1e-4,
        max_workers=None,
        **_,
    ):
        epsilons = sorted((float(e) for e in epsilons), reverse=True)
        if len(epsilons) < 2:
            raise ValueError("epsilons needs at least two values")
        fields = build_fields(model, "exact", max_workers=max_workers)
        grid = build_grid(model.measure.domain, grid_resolution)
        zs = instrument_values(fields)
        mu = reference_on_grid(model.measure, grid)

        truth_deviation = max(float(np.abs(phi(model.maps, z, fields, grid).density - mu.density).max()) for z in zs)

        tangent = sample_tangent(model.maps, K, seed, directions, model.eigen_bounds, alpha_max)
        if not tangent:
            raise ValueError("No admissible tangent direction found; lower K or widen the eigenvalue bounds")

        rows, shrinking = [], True
        for j, h in enumerate(tangent):
            for z in zs:
                gaps = differentiability_gaps(model.maps, h, z, fields, grid, epsilons)
                shrinking &= gaps[-1] < gaps[0] or gaps[0] == 0.0
                rows += [{"direction": j, "z": z, "epsilon": e, "gap": g} for e, g in zip(epsilons, gaps)]
        gap_frame = pd.DataFrame(rows)
        ratios = (
            gap_frame[gap_frame.epsilon == epsilons[0]].gap.to_numpy()
            / gap_frame[gap_frame.epsilon == epsilons[-1]].gap.to_numpy()
        )

        piola = [
            {"d": d, "step": float(step), "residual": piola_residual(q, grid, float(step))}
            for d, q in enumerate(model.maps)
            for step in piola_steps
        ]
        mask, divergence = divergence_form_density(model.maps, tangent[0], zs[0], fields, grid, divergence_step)
        derivative = phi_prime(model.maps, tangent[0], zs[0], fields, grid)
        cross_check = float(np.abs(divergence - derivative.density[mask]).max()) if mask.any() else float("nan")
        conormal = [conormal_sign_check(q).to_dict() for q in model.maps]

        passed = bool(shrinking and truth_deviation < 1e-6)
        report = {
            "truth_deviation": truth_deviation,
            "directions": len(tangent),
            "epsilons": epsilons,
            "min_shrink_ratio": float(np.nanmin(ratios)) if ratios.size else float("nan"),
            "piola": piola,
            "divergence_cross_check": cross_check,
            "conormal": conormal,
            "provenance": derivative.provenance,
            "passed": passed,
        }
        tables = {
            "gaps": gap_frame,
            "piola": pd.DataFrame(piola),
            "phi_prime": derivative.to_frame(),
        }
        status = "PASS" if passed else "FAIL"
        summary = [
            f"linearize: {status} truth_deviation={truth_deviation:.3g} "
            f"min_shrink_ratio={report['min_shrink_ratio']:.4g} ({len(tangent)} directions)",
            f"piola: max_residual={max(r['residual'] for r in piola):.3g}",
            f"conormal: {'PASS' if all(c['passed'] for c in conormal) else 'FAIL'}",
        ]
        return (report, tables, summary, passed)


class ProbeRank:
    """
    Full-rank probe of phi' and finite-radius local uniqueness at the truth.

    With negative_control the mirrored bend direction is probed first; the run passes
    when that direction leaves the residual at zero.
    """

    @classmethod
    def CONFIG_TYPES(cls):
        return {
            "required": {
                "model": ("MODEL", {}),
            },
            "optional": {
                "directions": ("INT", {"default": 200, "min": 1}),
                "uniqueness_directions": ("INT", {"default": 20, "min": 1}),
                "radii": ("FLOAT_LIST", {"default": [1e-3, 2e-3, 4e-3]}),
                "grid_resolution": ("INT", {"default": 20, "min": 2, "max": 400}),
                "negative_control": ("BOOLEAN", {"default": False}),
            },
        }

    RETURN_NAMES = ("report", "tables", "summary", "passed")
    FUNCTION = "probe"
    CATEGORY = "ivmqr/Linearization"

    def probe(
        self,
        model,
        seed: int,
        directions: int = 200,
        uniqueness_directions: int = 20,
        radii=(1e-3, 2e-3, 4e-3),
        grid_resolution: int = 20,
        negative_control: bool = False,
        max_workers=None,
        **_,
    ):
        fields = build_fields(model, "exact", max_workers=max_workers)
        grid = build_grid(model.measure.domain, grid_resolution)
        tangent = probe_directions_for(model, directions, seed, negative_control)

        probe = full_rank_probe(model.maps, fields, grid, tangent, max_workers)
        table = local_uniqueness_probe(
            model.maps, fields, grid, radii, tangent[:uniqueness_directions], model.measure,
            model.eigen_bounds, max_workers,
        )
        full_rank = probe.minimum > ZERO_TOLERANCE
        unique = bool(np.isfinite(table.envelope_slope) and table.envelope_slope > ZERO_TOLERANCE)
        identified = full_rank and unique
        passed = not identified if negative_control else identified

        report = {
            "probe": probe.to_dict(),
            "uniqueness": table.to_dict(),
            "full_rank": full_rank,
            "locally_unique": unique,
            "negative_control": negative_control,
            "passed": passed,
        }
        tables = {
            "probe": pd.DataFrame({"direction": range(len(probe.values)), "size": probe.values}),
            "uniqueness": table.to_frame(),
        }
        suffix = " (expected)" if negative_control and not identified else ""
        summary = [
            f"full-rank: {'PASS' if full_rank else 'FAIL'}{suffix if not full_rank else ''} "
            f"min={probe.minimum:.6g} over {len(probe.values)} directions",
            f"local-uniqueness: {'PASS' if unique else 'FAIL'}{suffix if not unique else ''} "
            f"envelope_slope={table.envelope_slope:.6g}",
        ]
        return (report, tables, summary, passed)


COMMAND_CLASS_MAPPINGS = {
    "linearize": Linearize,
    "probe-rank": ProbeRank,
}

COMMAND_DISPLAY_NAME_MAPPINGS = {
    "linearize": "Linearize Operator",
    "probe-rank": "Full-Rank and Local Uniqueness Probe",
}
