"""Kernel weights for local-constant estimation.

The kernel is scaled, ``K_h(v) = K(v / h) / h``, with support ``|v / h| <= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .model import AgeGrid


@dataclass(frozen=True)
class KernelConfig:
    family: str = "epanechnikov"
    bandwidth: float = 9.0

    def __post_init__(self):
        if self.family not in ("epanechnikov", "uniform"):
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        if not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be positive")


def kernel_weight(v, cfg: KernelConfig):
    """Scaled kernel evaluated at age offsets ``v`` (grid units)."""
    h = cfg.bandwidth
    x = np.asarray(v, dtype=float) / h
    inside = np.abs(x) <= 1.0
    if cfg.family == "epanechnikov":
        w = np.where(inside, 0.75 / h * (1.0 - x * x), 0.0)
    else:
        w = np.where(inside, 0.5 / h, 0.0)
    return w if w.ndim else float(w)


def local_weights(grid: AgeGrid, a: float, cfg: KernelConfig,
                  bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Kernel weight of every grid midpoint relative to target age ``a``.

    When ``h`` is narrower than a cell and no midpoint falls in the support,
    all weight goes to the nearest midpoint.
    """
    if bounds is not None and not bounds[0] <= a <= bounds[1]:
        raise DomainError(f"target age {a} outside [{bounds[0]}, {bounds[1]}]")
    w = kernel_weight(grid.midpoints - a, cfg)
    if not np.any(w > 0):
        w = np.zeros(grid.n_cells)
        w[grid.cell_index(a)] = 1.0
    return w


def kernel_mass(lo, hi, a, cfg: KernelConfig):
    """Integral of ``K_h(v - a)`` over ``v`` in ``[lo, hi]`` (closed form)."""
    h = cfg.bandwidth
    x0 = np.clip((np.asarray(lo, dtype=float) - a) / h, -1.0, 1.0)
    x1 = np.clip((np.asarray(hi, dtype=float) - a) / h, -1.0, 1.0)
    if cfg.family == "epanechnikov":
        def prim(x):
            return 0.75 * (x - x ** 3 / 3.0)
    else:
        def prim(x):
            return 0.5 * x
    return prim(x1) - prim(x0)
