"""
ivmqr - Numerical laboratory for IV multivariate quantile regression

Structural models built from convex potentials, identification condition audits,
linearization probes and recovery experiments, exposed as CLI subcommands.
"""

__version__ = "0.1.0"

# Import simulation commands
from .nodes.simulation_nodes import (
    SimulateSample,
    VerifyImplication,
    DemoRankViolation,
    COMMAND_CLASS_MAPPINGS as SIMULATION_MAPPINGS,
    COMMAND_DISPLAY_NAME_MAPPINGS as SIMULATION_DISPLAY_MAPPINGS,
)

# Import identification commands
from .nodes.identification_nodes import (
    CheckIdentification,
    COMMAND_CLASS_MAPPINGS as IDENTIFICATION_MAPPINGS,
    COMMAND_DISPLAY_NAME_MAPPINGS as IDENTIFICATION_DISPLAY_MAPPINGS,
)

# Import linearization commands
from .nodes.linearization_nodes import (
    Linearize,
    ProbeRank,
    COMMAND_CLASS_MAPPINGS as LINEARIZATION_MAPPINGS,
    COMMAND_DISPLAY_NAME_MAPPINGS as LINEARIZATION_DISPLAY_MAPPINGS,
)

# Import solver commands
from .nodes.solver_nodes import (
    FitModel,
    RecoverModel,
    COMMAND_CLASS_MAPPINGS as SOLVER_MAPPINGS,
    COMMAND_DISPLAY_NAME_MAPPINGS as SOLVER_DISPLAY_MAPPINGS,
)


COMMAND_CLASS_MAPPINGS = {}
COMMAND_DISPLAY_NAME_MAPPINGS = {}

# Register simulation commands
COMMAND_CLASS_MAPPINGS.update(SIMULATION_MAPPINGS)
COMMAND_DISPLAY_NAME_MAPPINGS.update(SIMULATION_DISPLAY_MAPPINGS)

# Register identification commands
COMMAND_CLASS_MAPPINGS.update(IDENTIFICATION_MAPPINGS)
COMMAND_DISPLAY_NAME_MAPPINGS.update(IDENTIFICATION_DISPLAY_MAPPINGS)

# Register linearization commands
COMMAND_CLASS_MAPPINGS.update(LINEARIZATION_MAPPINGS)
COMMAND_DISPLAY_NAME_MAPPINGS.update(LINEARIZATION_DISPLAY_MAPPINGS)

# Register solver commands
COMMAND_CLASS_MAPPINGS.update(SOLVER_MAPPINGS)
COMMAND_DISPLAY_NAME_MAPPINGS.update(SOLVER_DISPLAY_MAPPINGS)

__all__ = ["COMMAND_CLASS_MAPPINGS", "COMMAND_DISPLAY_NAME_MAPPINGS", "__version__"]
