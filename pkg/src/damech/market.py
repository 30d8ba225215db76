"""Market instances and the seeded generator that produces training/evaluation batches.

A market instance is one realized double auction: per-unit bids from consumers,
per-unit asks from suppliers, the support bounds of the valuation
distributions, and the demand/supply quantities. Sampling is deterministic
given (config, sample index); see :func:`instance_rng` for the stream-splitting
rule that makes batch generation order-independent and parallelizable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_interval(name: str, lo, hi) -> None:
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError(f"{name} bounds must be finite, got ({lo}, {hi})")
    if lo > hi:
        raise ValueError(f"{name} interval is reversed: ({lo}, {hi})")


@dataclass(frozen=True)
class MarketConfig:
    """Distributional description of one market family.

    Consumer and supplier counts are drawn uniformly from the integer ranges
    ``m_range``/``n_range`` (inclusive). Per-unit valuations are i.i.d. uniform
    on [value_low, value_high] on both sides; demand/supply quantities are
    continuous uniform on [quantity_low, quantity_high].
    """

    m_range: tuple[int, int] = (1, 10)
    n_range: tuple[int, int] = (1, 10)
    value_low: float = 0.1
    value_high: float = 1.0
    quantity_low: float = 1.0
    quantity_high: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "m_range", (int(self.m_range[0]), int(self.m_range[1])))
        object.__setattr__(self, "n_range", (int(self.n_range[0]), int(self.n_range[1])))
        for name, (lo, hi) in (("m_range", self.m_range), ("n_range", self.n_range)):
            _check_interval(name, lo, hi)
            if lo < 1:
                raise ValueError(f"{name} must be >= 1, got {lo}")
        # degenerate supports (low == high) are allowed; they pin every draw
        _check_interval("value", self.value_low, self.value_high)
        _check_interval("quantity", self.quantity_low, self.quantity_high)
        if self.quantity_low <= 0:
            raise ValueError(f"quantity_low must be positive, got {self.quantity_low}")

    def with_sizes(self, m: int, n: int) -> "MarketConfig":
        """Copy of this config with consumer/supplier counts pinned (evaluation markets)."""
        return MarketConfig(
            m_range=(m, m),
            n_range=(n, n),
            value_low=self.value_low,
            value_high=self.value_high,
            quantity_low=self.quantity_low,
            quantity_high=self.quantity_high,
            seed=self.seed,
        )


@dataclass
class MarketInstance:
    """One realized market: reported values, support bounds, and quantities."""

    bids: np.ndarray       # (m,) consumer per-unit bids
    asks: np.ndarray       # (n,) supplier per-unit asks
    bid_low: np.ndarray    # (m,) lower support of each consumer's valuation
    bid_high: np.ndarray   # (m,)
    ask_low: np.ndarray    # (n,)
    ask_high: np.ndarray   # (n,)
    demand: np.ndarray     # (m,) units each consumer can absorb
    supply: np.ndarray     # (n,) units each supplier can provide

    @property
    def m(self) -> int:
        return len(self.bids)

    @property
    def n(self) -> int:
        return len(self.asks)

    def validate(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ValueError("market needs at least one consumer and one supplier")
        for name, arr, length in (
            ("bids", self.bids, self.m),
            ("bid_low", self.bid_low, self.m),
            ("bid_high", self.bid_high, self.m),
            ("demand", self.demand, self.m),
            ("asks", self.asks, self.n),
            ("ask_low", self.ask_low, self.n),
            ("ask_high", self.ask_high, self.n),
            ("supply", self.supply, self.n),
        ):
            if arr.shape != (length,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({length},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(self.bids < self.bid_low) or np.any(self.bids > self.bid_high):
            raise ValueError("bids fall outside their declared support")
        if np.any(self.asks < self.ask_low) or np.any(self.asks > self.ask_high):
            raise ValueError("asks fall outside their declared support")
        if np.any(self.demand <= 0) or np.any(self.supply <= 0):
            raise ValueError("quantities must be strictly positive")

    def with_bids(self, bids: np.ndarray) -> "MarketInstance":
        """Copy with consumer reports replaced (misreport evaluation)."""
        return MarketInstance(
            bids=np.asarray(bids, dtype=float),
            asks=self.asks,
            bid_low=self.bid_low,
            bid_high=self.bid_high,
            ask_low=self.ask_low,
            ask_high=self.ask_high,
            demand=self.demand,
            supply=self.supply,
        )

    def with_asks(self, asks: np.ndarray) -> "MarketInstance":
        """Copy with supplier reports replaced (misreport evaluation)."""
        return MarketInstance(
            bids=self.bids,
            asks=np.asarray(asks, dtype=float),
            bid_low=self.bid_low,
            bid_high=self.bid_high,
            ask_low=self.ask_low,
            ask_high=self.ask_high,
            demand=self.demand,
            supply=self.supply,
        )


def instance_rng(cfg: MarketConfig, index: int) -> np.random.Generator:
    """Generator for sample ``index`` of config ``cfg``.

    Stream-splitting rule: sample k is drawn from a fresh PCG64 stream seeded
    by the pair (cfg.seed, k). Batches therefore concatenate: drawing samples
    [0, c) equals drawing [0, a) and [a, c) separately, and samples may be
    generated in parallel without changing results.
    """
    return np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, index])


def sample_market(cfg: MarketConfig, rng: np.random.Generator) -> MarketInstance:
    """Draw one market instance from ``cfg`` using the supplied generator.

    Draw order is fixed (m, n, bids, asks, demand, supply) so that a given
    generator state always yields the same instance.
    """
    m = int(rng.integers(cfg.m_range[0], cfg.m_range[1] + 1))
    n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
    return MarketInstance(
        bids=rng.uniform(cfg.value_low, cfg.value_high, m),
        asks=rng.uniform(cfg.value_low, cfg.value_high, n),
        bid_low=np.full(m, cfg.value_low),
        bid_high=np.full(m, cfg.value_high),
        ask_low=np.full(n, cfg.value_low),
        ask_high=np.full(n, cfg.value_high),
        demand=rng.uniform(cfg.quantity_low, cfg.quantity_high, m),
        supply=rng.uniform(cfg.quantity_low, cfg.quantity_high, n),
    )


def sample_batch(cfg: MarketConfig, count: int, start_index: int = 0) -> list[MarketInstance]:
    """Draw ``count`` independent instances at indices [start_index, start_index + count).

    Uses the per-index stream rule of :func:`instance_rng`, so batches starting
    at different offsets tile one deterministic global sequence.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [sample_market(cfg, instance_rng(cfg, start_index + k)) for k in range(count)]
