"""Incentive-compatibility gap estimation and adversarial misreport search.

The Bayesian IC constraint for a consumer says truthful bidding maximizes
expected utility, the expectation running over everyone else's reports. We
estimate the worst case with a probe: a candidate truthful vector, a candidate
misreport vector, and selector logits whose softmax picks which agent is being
probed. For each sampled profile the probed agent's report is spliced into the
profile (selector * candidate + (1 - selector) * sampled), the mechanism runs
once on the truthful splice and once on the misreport splice, and the gap is
the selected utility difference averaged over profiles. Nonnegative gap for
every probe means no profitable misreport.

The probed agent's utility is always measured against the candidate truthful
value; misreporting changes the mechanism's input, never the agent's own
valuation.

The inner loop (adversarial search) runs plain gradient descent on the gap,
clipping reports back into their support after every step. One-hot selectors
are a special case of the softmax parameterization with large frozen logits,
which is what makes relaxed search a lower bound on the enumerated minimum.

Probes are shared across a padded batch: instance-level softmax masking
renormalizes the selector over each instance's live agents.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .nets import MarketBatch

# logits at +/-40 make softmax one-hot to better than 1e-15
ONE_HOT_LOGIT = 40.0


@dataclass
class ICProbe:
    """Candidate truthful reports, misreports, and selector logits, per side."""

    bids: torch.Tensor
    bid_misreports: torch.Tensor
    bid_logits: torch.Tensor
    asks: torch.Tensor
    ask_misreports: torch.Tensor
    ask_logits: torch.Tensor
    value_low: float
    value_high: float

    @classmethod
    def initial(cls, m: int, n: int, value_low: float, value_high: float,
                rng: np.random.Generator) -> "ICProbe":
        """Uniform report candidates over the support; uniform (zero-logit) selectors."""
        def draw(k):
            return torch.as_tensor(rng.uniform(value_low, value_high, k), dtype=torch.float32)

        return cls(
            bids=draw(m),
            bid_misreports=draw(m),
            bid_logits=torch.zeros(m),
            asks=draw(n),
            ask_misreports=draw(n),
            ask_logits=torch.zeros(n),
            value_low=value_low,
            value_high=value_high,
        )

    def one_hot_consumer(self, index: int) -> "ICProbe":
        """Copy with the consumer selector pinned (numerically) one-hot at ``index``."""
        logits = torch.full_like(self.bid_logits, -ONE_HOT_LOGIT)
        logits[index] = ONE_HOT_LOGIT
        return replace(self, bid_logits=logits)

    def one_hot_supplier(self, index: int) -> "ICProbe":
        logits = torch.full_like(self.ask_logits, -ONE_HOT_LOGIT)
        logits[index] = ONE_HOT_LOGIT
        return replace(self, ask_logits=logits)

    def detach(self) -> "ICProbe":
        return replace(
            self,
            bids=self.bids.detach(),
            bid_misreports=self.bid_misreports.detach(),
            bid_logits=self.bid_logits.detach(),
            asks=self.asks.detach(),
            ask_misreports=self.ask_misreports.detach(),
            ask_logits=self.ask_logits.detach(),
        )


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-instance softmax over live entries; padded entries get exactly 0."""
    scores = logits.expand(mask.shape[0], -1).masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


def compose_reports(candidate: torch.Tensor, sampled: torch.Tensor,
                    selector: torch.Tensor) -> torch.Tensor:
    """Splice the probed report into each sampled profile."""
    if candidate.shape[-1] != sampled.shape[-1]:
        raise ValueError(
            f"candidate length {candidate.shape[-1]} != profile length {sampled.shape[-1]}"
        )
    return selector * candidate + (1.0 - selector) * sampled


def consumer_utilities(values, q, p):
    """u_i = value_i * allocated units - price paid."""
    return values * q.sum(dim=-1) - p


def supplier_utilities(values, q, s):
    """u_j = offer received - value_j * units supplied."""
    return s - values * q.sum(dim=-2)


def consumer_ic_gap(model, probe: ICProbe, batch: MarketBatch) -> torch.Tensor:
    """Monte Carlo estimate of the selected truthful-minus-misreport utility."""
    sel = masked_softmax(probe.bid_logits, batch.consumer_mask)
    truthful = batch.with_bids(compose_reports(probe.bids, batch.bids, sel))
    misreport = batch.with_bids(compose_reports(probe.bid_misreports, batch.bids, sel))
    q_t, p_t, _ = model(truthful)
    q_m, p_m, _ = model(misreport)
    u_t = consumer_utilities(probe.bids, q_t, p_t)
    u_m = consumer_utilities(probe.bids, q_m, p_m)
    return (sel * (u_t - u_m)).sum(dim=-1).mean()


def supplier_ic_gap(model, probe: ICProbe, batch: MarketBatch) -> torch.Tensor:
    sel = masked_softmax(probe.ask_logits, batch.supplier_mask)
    truthful = batch.with_asks(compose_reports(probe.asks, batch.asks, sel))
    misreport = batch.with_asks(compose_reports(probe.ask_misreports, batch.asks, sel))
    q_t, _, s_t = model(truthful)
    q_m, _, s_m = model(misreport)
    h_t = supplier_utilities(probe.asks, q_t, s_t)
    h_m = supplier_utilities(probe.asks, q_m, s_m)
    return (sel * (h_t - h_m)).sum(dim=-1).mean()


def hinge_losses(gap_c, gap_s):
    """Penalties active only for violated (negative-gap) constraints."""
    zero = torch.zeros(())
    gap_c = torch.as_tensor(gap_c)
    gap_s = torch.as_tensor(gap_s)
    return torch.maximum(zero, -gap_c), torch.maximum(zero, -gap_s)


def optimize_probe(model, probe: ICProbe, batch: MarketBatch, steps: int, rate: float,
                   optimize_logits: bool = True) -> tuple[ICProbe, float, float]:
    """Descend both gaps for ``steps`` plain gradient steps.

    Minimizing the gap drives the probe toward the strongest violation.
    Reports are clipped back into their support after every step; logits are
    unconstrained (and frozen entirely when enumerating one-hot selectors).
    Returns the updated probe and the post-update gap values.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    probe = probe.detach()
    reports = [probe.bids, probe.bid_misreports, probe.asks, probe.ask_misreports]
    logits = [probe.bid_logits, probe.ask_logits]
    free = reports + (logits if optimize_logits else [])
    for t in free:
        t.requires_grad_(True)

    for _ in range(steps):
        total = consumer_ic_gap(model, probe, batch) + supplier_ic_gap(model, probe, batch)
        grads = torch.autograd.grad(total, free, allow_unused=True)
        with torch.no_grad():
            for tensor, grad in zip(free, grads):
                if grad is not None:
                    tensor -= rate * grad
            for tensor in reports:
                tensor.clamp_(probe.value_low, probe.value_high)

    probe = probe.detach()
    with torch.no_grad():
        gap_c = float(consumer_ic_gap(model, probe, batch))
        gap_s = float(supplier_ic_gap(model, probe, batch))
    return probe, gap_c, gap_s


def rsic_gaps(model, batch: MarketBatch, sample_count: int,
              rng: np.random.Generator) -> tuple[ICProbe, float, float]:
    """Random-sampling substitute for the adversarial search.

    Draws ``sample_count`` random (reports, misreports, one-hot agent) probes
    per side and keeps the per-side minimum-gap draws. No gradients involved.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    m = batch.consumer_mask.shape[1]
    n = batch.supplier_mask.shape[1]
    low = float(batch.bid_low[batch.consumer_mask].min())
    high = float(batch.bid_high[batch.consumer_mask].max())

    best_c: tuple[float, ICProbe] | None = None
    best_s: tuple[float, ICProbe] | None = None
    with torch.no_grad():
        for _ in range(sample_count):
            draw = ICProbe.initial(m, n, low, high, rng)
            draw = draw.one_hot_consumer(int(rng.integers(m)))
            draw = draw.one_hot_supplier(int(rng.integers(n)))
            gap_c = float(consumer_ic_gap(model, draw, batch))
            gap_s = float(supplier_ic_gap(model, draw, batch))
            if best_c is None or gap_c < best_c[0]:
                best_c = (gap_c, draw)
            if best_s is None or gap_s < best_s[0]:
                best_s = (gap_s, draw)

    gap_c, probe_c = best_c
    gap_s, probe_s = best_s
    merged = replace(
        probe_c,
        asks=probe_s.asks,
        ask_misreports=probe_s.ask_misreports,
        ask_logits=probe_s.ask_logits,
    )
    return merged, gap_c, gap_s


def brute_force_ic_oracle(mechanism, cfg, grid_points: int = 51, profiles: int = 200):
    """Exhaustive grid estimate of the worst expected misreport gain per side.

    ``mechanism`` maps a MarketInstance to (Q, p, s) numpy arrays. For every
    agent and every grid report r we average that agent's allocation and
    payment over the sampled profiles; utilities being linear in the true
    value, the full (true value, misreport) violation matrix then comes out in
    closed form. Returns (consumer_violation, supplier_violation), floored at
    zero. Tractable only for small markets.
    """
    from .market import sample_batch

    if cfg.m_range[0] != cfg.m_range[1] or cfg.n_range[0] != cfg.n_range[1]:
        raise ValueError("oracle needs a fixed-size market config")
    grid = np.linspace(cfg.value_low, cfg.value_high, grid_points)
    batch = sample_batch(cfg, profiles)
    m, n = batch[0].m, batch[0].n

    def side_violation(count, run_with_report):
        worst = 0.0
        for agent in range(count):
            alloc = np.zeros(grid_points)
            pay = np.zeros(grid_points)
            for g, r in enumerate(grid):
                for inst in batch:
                    units, paid = run_with_report(inst, agent, r)
                    alloc[g] += units
                    pay[g] += paid
            alloc /= profiles
            pay /= profiles
            truthful = grid * alloc - pay
            gain = grid[:, None] * alloc[None, :] - pay[None, :] - truthful[:, None]
            worst = max(worst, float(gain.max()))
        return worst

    def consumer_report(inst, i, r):
        reports = inst.bids.copy()
        reports[i] = r
        q, p, _ = mechanism(inst.with_bids(reports))
        return q[i].sum(), p[i]

    def supplier_report(inst, j, r):
        reports = inst.asks.copy()
        reports[j] = r
        q, _, s = mechanism(inst.with_asks(reports))
        # supplier utility = s - w * units, so "payment" enters negated
        return -q[:, j].sum(), -s[j]

    return side_violation(m, consumer_report), side_violation(n, supplier_report)
