"""Gradient conflict elimination for the three training objectives.

The trainer produces one gradient for the profit objective and one for each
side's incentive penalty, all flattened over the same parameter vector. Two
gradients conflict when their inner product is negative; conflicts are removed
by projecting onto the orthogonal complement of the offending direction, with
the profit gradient treated as lowest priority. The procedure is:

1. shuffle the two penalty gradients into a random order (a, b);
2. project the profit gradient away from a if they conflict, then away from
   the a-orthogonalized b if a conflict remains;
3. if the two penalty gradients conflict with each other, project each away
   from the other's original direction.

All arithmetic runs in float64 regardless of input dtype; float32 dot
products over ~1e6 entries cannot meet the 1e-6 relative orthogonality
guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradientSet:
    """Flat objective gradients plus the penalty weights used when merging.

    ``profit`` is the gradient of the negated-profit loss; ``consumer_ic`` and
    ``supplier_ic`` are the gradients of the two hinge penalties. All three
    must have the length of the flattened parameter vector.
    """

    profit: np.ndarray
    consumer_ic: np.ndarray
    supplier_ic: np.ndarray
    consumer_weight: float = 0.5
    supplier_weight: float = 0.5

    def __post_init__(self):
        self.profit = np.asarray(self.profit, dtype=np.float64)
        self.consumer_ic = np.asarray(self.consumer_ic, dtype=np.float64)
        self.supplier_ic = np.asarray(self.supplier_ic, dtype=np.float64)
        if not (self.profit.shape == self.consumer_ic.shape == self.supplier_ic.shape):
            raise ValueError(
                "gradient length mismatch: "
                f"{self.profit.shape}, {self.consumer_ic.shape}, {self.supplier_ic.shape}"
            )
        if self.profit.ndim != 1:
            raise ValueError("gradients must be flat vectors")
        for name in ("profit", "consumer_ic", "supplier_ic"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} gradient contains non-finite entries")
        if self.consumer_weight < 0 or self.supplier_weight < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass(frozen=True)
class ConflictFlags:
    """Which projections actually fired during one elimination pass."""

    profit_first: bool = False
    profit_second: bool = False
    penalties_mutual: bool = False
    order_swapped: bool = False  # True when the supplier gradient was drawn first

    def any(self) -> bool:
        return self.profit_first or self.profit_second or self.penalties_mutual


def project(grad: np.ndarray, onto: np.ndarray) -> np.ndarray:
    """Remove from ``grad`` its component along ``onto``.

    Returns grad - (<grad, onto> / ||onto||^2) * onto, which is orthogonal to
    ``onto`` up to rounding. A numerically zero ``onto`` direction leaves
    ``grad`` unchanged.
    """
    grad = np.asarray(grad, dtype=np.float64)
    onto = np.asarray(onto, dtype=np.float64)
    denom = float(np.dot(onto, onto))
    if denom < np.finfo(np.float64).tiny:
        # subnormal squared norms carry too few bits for a stable quotient
        return grad.copy()
    return grad - (float(np.dot(grad, onto)) / denom) * onto


def eliminate_conflicts(grads: GradientSet, rng: np.random.Generator) -> tuple[GradientSet, ConflictFlags]:
    """Return a conflict-free copy of ``grads`` plus flags saying what fired.

    Consumes exactly one draw from ``rng`` (the penalty shuffle), so callers
    sharing a seeded stream stay reproducible. Inner-product tests are exact
    strict comparisons: a zero inner product never triggers a projection.
    """
    swapped = bool(rng.random() < 0.5)
    first, second = (
        (grads.supplier_ic, grads.consumer_ic) if swapped else (grads.consumer_ic, grads.supplier_ic)
    )

    profit = grads.profit.astype(np.float64)
    profit_first = bool(np.dot(profit, first) < 0.0)
    if profit_first:
        profit = project(profit, first)
    second_orth = project(second, first)
    profit_second = bool(np.dot(profit, second_orth) < 0.0)
    if profit_second:
        profit = project(profit, second_orth)

    consumer = grads.consumer_ic
    supplier = grads.supplier_ic
    mutual = bool(np.dot(consumer, supplier) < 0.0)
    if mutual:
        # both projections use the pre-adjustment originals
        consumer, supplier = project(consumer, grads.supplier_ic), project(supplier, grads.consumer_ic)

    out = GradientSet(
        profit=profit,
        consumer_ic=consumer,
        supplier_ic=supplier,
        consumer_weight=grads.consumer_weight,
        supplier_weight=grads.supplier_weight,
    )
    flags = ConflictFlags(
        profit_first=profit_first,
        profit_second=profit_second,
        penalties_mutual=mutual,
        order_swapped=swapped,
    )
    return out, flags


def merge(grads: GradientSet) -> np.ndarray:
    """Weighted sum of the three gradients: profit + w_c * consumer + w_s * supplier."""
    return (
        grads.profit
        + grads.consumer_weight * grads.consumer_ic
        + grads.supplier_weight * grads.supplier_ic
    )
