"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np


def check_tsmi(x, model=None, name: str = "TSMI") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"{name} must be (*grid, K) with a 2-D or 3-D grid, got shape {x.shape}")
    if model is not None and x.shape != model.tsmi_shape:
        raise ValueError(f"{name} shape {x.shape} does not match model {model.tsmi_shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x.astype(np.complex128, copy=False)


def check_kspace(y, model) -> np.ndarray:
    """Accept ``(C, T, P)`` data for ``model``."""
    y = np.asarray(y)
    if y.shape != model.kspace_shape:
        raise ValueError(f"k-space shape {y.shape} does not match model {model.kspace_shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("k-space contains non-finite values")
    return y.astype(np.complex128, copy=False)


def check_positive(value, name: str, strict: bool = True) -> float:
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        raise ValueError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value}")
    return value


def check_choice(value, choices, name: str) -> str:
    if value not in choices:
        raise ValueError(f"unsupported {name} {value!r}; valid choices: {', '.join(choices)}")
    return value
