# ivmqr Utilities
from .array_ops import ensure_points, ensure_matrix_stack, symmetric_part, min_eigenvalues, to_frame, from_frame
from .batch_utils import (
    DEFAULT_CHUNK_SIZE,
    chunk_slices,
    spawn_generators,
    run_ordered,
    accumulate_results,
)
