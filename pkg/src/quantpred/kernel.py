"""Nadaraya-Watson kernel regression with the Gaussian kernel."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import DomainError

# smallest positive normal double; below this every weight has underflowed
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float
    kernel_form: str = "radial"  # "radial" or "inner_product"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise DomainError("bandwidth must be positive")
        if self.kernel_form not in ("radial", "inner_product"):
            raise DomainError(f"unknown kernel form {self.kernel_form!r}")


def gaussian_kernel(x, x_prime, config: KernelConfig) -> float:
    """exp(-||x - x'||^2 / (2 sigma^2)) for the radial form, or the
    inner-product variant exp(x.x' / (2 sigma^2))."""
    a = np.atleast_1d(np.asarray(x, dtype=float))
    b = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    s2 = 2.0 * config.bandwidth ** 2
    if config.kernel_form == "inner_product":
        return float(np.exp(np.dot(a, b) / s2))
    d = a - b
    return float(np.exp(-np.dot(d, d) / s2))


def nw_estimate(train, x, config: KernelConfig) -> float:
    """Kernel-weighted average sum(y_i K(x, x_i)) / sum(K(x, x_i)).

    When every kernel value underflows to a subnormal the normalized-weight
    formula is 0/0; the limit is the nearest neighbor, so we return the
    target of the closest training point and warn.
    """
    X = np.asarray(train.features, dtype=float)
    y = np.asarray(train.targets, dtype=float)
    if X.shape[0] == 0:
        raise DomainError("training set must be non-empty")
    q = np.atleast_1d(np.asarray(x, dtype=float))
    if q.shape[0] != X.shape[1]:
        raise DomainError(f"query dimension {q.shape[0]} != {X.shape[1]}")
    diff = X - q[None, :]
    d2 = np.einsum("ij,ij->i", diff, diff)
    if config.kernel_form == "inner_product":
        k = np.exp(X @ q / (2.0 * config.bandwidth ** 2))
    else:
        k = np.exp(-d2 / (2.0 * config.bandwidth ** 2))
    total = k.sum()
    if total < _TINY or np.max(k) < _TINY:
        warnings.warn(
            "all kernel weights underflowed; falling back to nearest neighbor",
            RuntimeWarning,
            stacklevel=2,
        )
        return float(y[np.argmin(d2)])
    return float(np.dot(k, y) / total)


def nw_weights(train, x, config: KernelConfig) -> np.ndarray:
    """Normalized kernel weights at a query point (radial form)."""
    X = np.asarray(train.features, dtype=float)
    q = np.atleast_1d(np.asarray(x, dtype=float))
    diff = X - q[None, :]
    d2 = np.einsum("ij,ij->i", diff, diff)
    k = np.exp(-d2 / (2.0 * config.bandwidth ** 2))
    total = k.sum()
    if total < _TINY:
        raise DomainError("kernel weights underflowed; no normalization")
    return k / total
