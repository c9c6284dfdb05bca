"""
Array utilities for point clouds and matrix stacks.

ivmqr stores points as (N, p) arrays and per-point matrices as (N, p, p) stacks:
- POINTS: (Batch, Dimension) float64
- MATRICES: (Batch, Dimension, Dimension) float64
"""

import numpy as np
import pandas as pd


def ensure_points(points, dim: int | None = None) -> np.ndarray:
    """
    Ensure points have a batch dimension ((N, p) format).

    A single point given as shape (p,) is promoted to (1, p); scalars become (1, 1).

    Args:
        points: Point or batch of points
        dim: Expected dimension p, checked when given

    Returns:
        float64 array with shape (N, p)
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[np.newaxis, :] if dim is None or arr.shape[0] == dim else arr[:, np.newaxis]
    if arr.ndim != 2:
        raise ValueError(f"Expected points of shape (N, p), got {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"Expected points of dimension {dim}, got {arr.shape[1]}")
    return arr


def ensure_matrix_stack(matrices) -> np.ndarray:
    """
    Ensure matrices have a batch dimension.

    Args:
        matrices: Matrix (p, p) or stack (N, p, p)

    Returns:
        float64 array with shape (N, p, p)
    """
    arr = np.asarray(matrices, dtype=float)
    if arr.ndim == 2:
        return arr[np.newaxis]
    return arr


def symmetric_part(matrices: np.ndarray) -> np.ndarray:
    """Return (M + M') / 2 for a matrix or a stack of matrices."""
    return 0.5 * (matrices + np.swapaxes(matrices, -1, -2))


def min_eigenvalues(matrices: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of the symmetric part of each matrix in a stack."""
    return np.linalg.eigvalsh(symmetric_part(ensure_matrix_stack(matrices)))[..., 0]


def to_frame(points: np.ndarray, prefix: str = "u", **columns) -> pd.DataFrame:
    """
    Convert a point array to a DataFrame for CSV dumps.

    Coordinates come first as prefix1..prefixp, then the extra columns in keyword order.

    Args:
        points: (N, p) array
        prefix: Column name prefix for coordinates
        **columns: Extra (N,) columns

    Returns:
        DataFrame with fixed column order
    """
    points = ensure_points(points)
    frame = pd.DataFrame(points, columns=[f"{prefix}{i + 1}" for i in range(points.shape[1])])
    for name, values in columns.items():
        frame[name] = np.asarray(values)
    return frame


def from_frame(frame: pd.DataFrame, prefix: str = "u") -> np.ndarray:
    """
    Extract the prefix1..prefixp coordinate block of a DataFrame.

    Args:
        frame: DataFrame produced by to_frame (or a CSV read back)
        prefix: Column name prefix for coordinates

    Returns:
        (N, p) float64 array
    """
    names = []
    i = 1
    while f"{prefix}{i}" in frame.columns:
        names.append(f"{prefix}{i}")
        i += 1
    if not names:
        raise ValueError(f"No '{prefix}1..' columns in frame")
    return frame[names].to_numpy(dtype=float)


def frozen_copy(array) -> np.ndarray:
    """
    Copy an array and mark it read-only.

    Model and grid types are immutable; always freeze arrays before storing them!

    Args:
        array: Any array-like

    Returns:
        Read-only float64 copy
    """
    out = np.array(array, dtype=float, copy=True)
    out.setflags(write=False)
    return out
