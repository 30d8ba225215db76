"""Classical double-auction baselines: trade reduction and random matching.

Both return the same (Q, p, s) outcome triple as the learned mechanism, as
plain numpy arrays, so one evaluation harness serves all three.

Trade reduction generalizes the classic single-unit rule to quantities by
expanding each agent into a block of marginal units (buyer i supplies x_i
units of willingness-to-pay v_i). Buyer units are sorted by bid descending,
seller units by ask ascending; trade is efficient while the bid step function
stays above the ask step function. The whole block containing the breakeven
unit is reduced (never trades) on both sides, and everything before it trades
at uniform breakeven prices: every trading buyer pays the breakeven bid,
every trading seller receives the breakeven ask. Reducing the price-setting
block is what buys truthfulness; the platform keeps a nonnegative margin per
unit.

Random matching pairs min(m, n) buyers and sellers uniformly at random; each
pair trades a single unit if the bid covers the ask, with pay-your-bid /
receive-your-ask pricing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import MarketInstance

TRM_POLICY = "marginal-unit-whole-block-reduction"
RM_PRICE_RULE = "pay-bid-receive-ask"
RM_PAIRING = "uniform-one-to-one"


@dataclass(frozen=True)
class BaselineKind:
    """Baseline selector plus the policy tags documenting rule variants."""

    kind: str
    trm_policy: str = TRM_POLICY
    rm_price_rule: str = RM_PRICE_RULE
    rm_pairing: str = RM_PAIRING

    def __post_init__(self):
        if self.kind not in ("trm", "rm"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.trm_policy != TRM_POLICY:
            raise ValueError(f"unsupported trm policy {self.trm_policy!r}")
        if self.rm_price_rule != RM_PRICE_RULE or self.rm_pairing != RM_PAIRING:
            raise ValueError("unsupported rm policy tags")


def _empty_outcome(m: int, n: int):
    return np.zeros((m, n)), np.zeros(m), np.zeros(n)


def trade_reduction(inst: MarketInstance):
    """Trade reduction outcome (Q, p, s) for one instance."""
    m, n = inst.m, inst.n
    buyer_order = np.argsort(-inst.bids, kind="stable")
    seller_order = np.argsort(inst.asks, kind="stable")
    bids = inst.bids[buyer_order]
    asks = inst.asks[seller_order]
    # cumulative unit counts; bcum[i] is the quantity strictly before block i
    bcum = np.concatenate([[0.0], np.cumsum(inst.demand[buyer_order])])
    scum = np.concatenate([[0.0], np.cumsum(inst.supply[seller_order])])

    # scan the merged block breakpoints; the bid/ask step functions are
    # constant on each segment, so crossing can only change at a breakpoint
    qmax = min(bcum[-1], scum[-1])
    points = np.unique(np.concatenate([bcum, scum]))
    points = points[points <= qmax]
    marginal = None
    for lo, hi in zip(points[:-1], points[1:]):
        i = np.searchsorted(bcum, lo, side="right") - 1
        j = np.searchsorted(scum, lo, side="right") - 1
        if bids[i] >= asks[j]:
            marginal = (i, j)
        else:
            break
    if marginal is None:
        return _empty_outcome(m, n)

    ib, js = marginal
    breakeven_bid = bids[ib]
    breakeven_ask = asks[js]
    traded = min(bcum[ib], scum[js])
    if traded <= 0:
        return _empty_outcome(m, n)

    # greedy two-pointer fill over the pre-marginal blocks
    q = np.zeros((m, n))
    bi = si = 0
    remaining = traded
    buyer_left = inst.demand[buyer_order].copy()
    seller_left = inst.supply[seller_order].copy()
    while remaining > 0 and bi < m and si < n:
        amount = min(buyer_left[bi], seller_left[si], remaining)
        q[buyer_order[bi], seller_order[si]] += amount
        buyer_left[bi] -= amount
        seller_left[si] -= amount
        remaining -= amount
        if buyer_left[bi] <= 0:
            bi += 1
        if seller_left[si] <= 0:
            si += 1

    p = breakeven_bid * q.sum(axis=1)
    s = breakeven_ask * q.sum(axis=0)
    return q, p, s


def random_matching(inst: MarketInstance, rng: np.random.Generator):
    """Random matching outcome (Q, p, s) for one instance."""
    m, n = inst.m, inst.n
    k = min(m, n)
    buyers = rng.permutation(m)[:k]
    sellers = rng.permutation(n)[:k]
    q = np.zeros((m, n))
    p = np.zeros(m)
    s = np.zeros(n)
    for i, j in zip(buyers, sellers):
        if inst.bids[i] >= inst.asks[j]:
            amount = min(1.0, inst.demand[i], inst.supply[j])
            q[i, j] = amount
            p[i] = inst.bids[i] * amount
            s[j] = inst.asks[j] * amount
    return q, p, s
