"""Flat key -> tensor parameter archives (.npz).

Keys are dotted paths; value-pool matrices are keyed by their lattice
offset, e.g. ``ssm.s1.b0.l0.h0.pool.wv(1,0,-1)``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .exceptions import ContractError, ShapeError


def save_params(params: dict[str, Tensor], path) -> None:
    np.savez(path, **{k: p.data for k, p in params.items()})


def load_params(path) -> dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {k: archive[k] for k in archive.files}


def apply_params(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    """Copy archived values into live parameter tensors, validating keys."""
    missing = set(params) - set(values)
    extra = set(values) - set(params)
    if missing or extra:
        raise ContractError(
            f"parameter archive mismatch: missing={sorted(missing)[:4]} "
            f"extra={sorted(extra)[:4]}")
    for name, p in params.items():
        v = np.asarray(values[name], dtype=np.float64)
        if v.shape != p.data.shape:
            raise ShapeError(f"archived '{name}' has shape {v.shape}, "
                             f"expected {p.data.shape}")
        p.data = v.copy()
