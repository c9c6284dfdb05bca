"""
Simulation commands for ivmqr.

Draw samples from a structural model, check the law of the recovered ranks given the
instrument, and run the rank-similarity violation demo.
"""

from ..domain import RankSet, default_rank_sets
from ..model import implication_gaps, rank_violation_demo, simulate


class SimulateSample:
    """
    Draw n rows (Y, D, Z) from the configured model.

    The CSV is a pure function of (config, seed): chunk streams are spawned from the
    seed, never from worker identity.
    """

    @classmethod
    def CONFIG_TYPES(cls):
        return {
            "required": {
                "model": ("MODEL", {}),
            },
            "optional": {
                "n": ("INT", {"default": 10_000, "min": 1}),
                "keep_latent": ("BOOLEAN", {"default": False}),
            },
        }

    RETURN_NAMES = ("report", "tables", "summary", "passed")
    FUNCTION = "simulate"
    CATEGORY = "ivmqr/Simulation"

    def simulate(self, model, seed: int, n: int = 10_000, keep_latent: bool = False, max_workers=None, **_):
        sample = simulate(model, n, seed, keep_latent=keep_latent, max_workers=max_workers)
        shares = sample.empirical_shares(model.treatments)
        report = {
            "n": sample.n,
            "dimension": sample.dimension,
            "empirical_shares": shares.tolist(),
            "model_shares": model.share_matrix().tolist(),
            "model": model.to_dict(),
        }
        summary = [f"simulate: {sample.n} rows, p={sample.dimension}, m={model.treatments}"]
        return (report, {"sample": sample.to_frame()}, summary, True)


class VerifyImplication:
    """
    Monte Carlo check that q_D^{-1}(Y) given Z=z follows the reference measure.

    Default sets: eight boxes and four half-space cuts of U.
    """

    @classmethod
    def CONFIG_TYPES(cls):
        return {
            "required": {
                "model": ("MODEL", {}),
            },
            "optional": {
                "n": ("INT", {"default": 100_000, "min": 1}),
                "multiplier": ("FLOAT", {"default": 3.0, "min": 0.0}),
                "sets": ("SETS", {}),
            },
        }

    RETURN_NAMES = ("report", "tables", "summary", "passed")
    FUNCTION = "verify"
    CATEGORY = "ivmqr/Simulation"

    def verify(self, model, seed: int, n: int = 100_000, multiplier: float = 3.0, sets=None,
               sample=None, max_workers=None, **_):
        if sets:
            rank_sets = [RankSet.from_dict(s) for s in sets]
        else:
            rank_sets = default_rank_sets(model.measure.domain)
        if sample is None:
            sample = simulate(model, n, seed, max_workers=max_workers)
        result = implication_gaps(model, sample, rank_sets, multiplier)
        report = result.to_dict()
        report["sets"] = [s.to_dict() for s in rank_sets]
        report["n"] = sample.n
        status = "PASS" if result.passed else "FAIL"
        summary = [f"verify-implication: {status} max_gap={result.max_gap:.6g} ({len(result.rows)} checked)"]
        return (report, {"gaps": result.to_frame()}, summary, result.passed)


class DemoRankViolation:
    """
    Scalar ranks of one outcome component compared across treatments within noise bands.

    The checked condition is rank similarity: a KS statistic above its critical value
    in some band is a failure.
    """

    @classmethod
    def CONFIG_TYPES(cls):
        return {
            "required": {
                "model": ("MODEL", {}),
            },
            "optional": {
                "n": ("INT", {"default": 100_000, "min": 2}),
                "component": ("INT", {"default": 0, "min": 0}),
                "alpha": ("FLOAT", {"default": 0.01, "min": 0.0, "max": 1.0}),
            },
        }

    RETURN_NAMES = ("report", "tables", "summary", "passed")
    FUNCTION = "demo"
    CATEGORY = "ivmqr/Simulation"

    def demo(self, model, seed: int, n: int = 100_000, component: int = 0, alpha: float = 0.01,
             max_workers=None, **_):
        if component >= model.dimension:
            raise ValueError(f"component {component} out of range for p={model.dimension}")
        result = rank_violation_demo(model, n, seed, component=component, alpha=alpha, max_workers=max_workers)
        status = "FAIL" if result.violation else "PASS"
        summary = [
            f"rank-similarity: {status} max_ks={result.max_statistic:.6g} "
            f"corr(rank, Z)={result.rank_instrument_correlation:.4f}"
        ]
        return (result.to_dict(), {}, summary, not result.violation)


COMMAND_CLASS_MAPPINGS = {
    "simulate": SimulateSample,
    "verify-implication": VerifyImplication,
    "demo-rank-violation": DemoRankViolation,
}

COMMAND_DISPLAY_NAME_MAPPINGS = {
    "simulate": "Simulate Sample",
    "verify-implication": "Verify Rank Law Given Z",
    "demo-rank-violation": "Rank Similarity Violation Demo",
}
