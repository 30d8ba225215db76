"""Shared numerical oracles: finite-difference derivatives on a float64 twin.

The analytic path is reverse-mode on the float32 model; the oracle path is
central differences of the same objective evaluated on a float64 copy, so the
two derivations share no code. Directions are random unit vectors in flat
parameter space.
"""

from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np
import torch

from damech.nets import flatten_parameters, load_flat_parameters


def float64_twin(model):
    return copy.deepcopy(model).double()


def float64_probe(probe):
    return replace(
        probe,
        bids=probe.bids.double(),
        bid_misreports=probe.bid_misreports.double(),
        bid_logits=probe.bid_logits.double(),
        asks=probe.asks.double(),
        ask_misreports=probe.ask_misreports.double(),
        ask_logits=probe.ask_logits.double(),
    )


def directional_fd(objective, model64, direction: np.ndarray, h: float = 1e-7) -> float:
    """Central difference of ``objective(model64)`` along ``direction``."""
    base = flatten_parameters(model64).astype(np.float64)
    try:
        load_flat_parameters(model64, base + h * direction)
        with torch.no_grad():
            f_plus = float(objective(model64))
        load_flat_parameters(model64, base - h * direction)
        with torch.no_grad():
            f_minus = float(objective(model64))
    finally:
        load_flat_parameters(model64, base)
    return (f_plus - f_minus) / (2.0 * h)


def directional_relative_error(analytic_flat: np.ndarray, objective, model64,
                               rng: np.random.Generator, h: float = 1e-7) -> float:
    """Relative mismatch between the analytic and FD directional derivatives."""
    direction = rng.standard_normal(analytic_flat.size)
    direction /= np.linalg.norm(direction)
    analytic = float(np.dot(analytic_flat, direction))
    numeric = directional_fd(objective, model64, direction, h=h)
    scale = max(abs(analytic), abs(numeric), 1e-6 * (1.0 + np.linalg.norm(analytic_flat)))
    return abs(analytic - numeric) / scale
