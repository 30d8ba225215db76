"""Evaluation harness: profit, worst-case IC violation, variance, sweeps.

Every mechanism (learned or classical) is evaluated through one adapter
protocol: ``outcomes(instances) -> list of (Q, p, s) numpy triples``. Profit
is a plain Monte Carlo mean. The IC metric grids each agent's report over the
support, averages that agent's allocation and payment per grid report across
T sampled profiles, and then reads the worst (true value, misreport) gain off
the closed-form violation matrix (utilities are linear in the true value, so
no second sampling pass is needed). For differentiable mechanisms the best
grid cell can optionally be refined with the adversarial probe optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .baselines import random_matching, trade_reduction
from .ic import ICProbe, consumer_ic_gap, optimize_probe, supplier_ic_gap
from .market import MarketConfig, MarketInstance, sample_batch
from .nets import MarketBatch
from .training import TrainHistory

# float32 forward pass; tolerance for counting a "violation" is a handful of ulps
IR_TOLERANCE = 1e-5


@dataclass
class EvalReport:
    mechanism: str
    m_range: tuple[int, int]
    n_range: tuple[int, int]
    value_low: float
    value_high: float
    profit_mean: float
    profit_se: float
    ic_consumer: float
    ic_supplier: float
    ir_violations: int
    samples: int
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FluctuationReport:
    profit_variance: float
    consumer_hinge_variance: float
    supplier_hinge_variance: float
    burn_in_records: int
    total_records: int


class NetMechanism:
    """Adapter running a trained network over instances in padded chunks."""

    def __init__(self, model, chunk_size: int = 256, name: str = "model"):
        self.model = model
        self.chunk_size = chunk_size
        self.name = name

    def outcomes(self, instances: list[MarketInstance]):
        results = []
        with torch.no_grad():
            for lo in range(0, len(instances), self.chunk_size):
                chunk = instances[lo : lo + self.chunk_size]
                batch = MarketBatch.from_instances(chunk)
                q, p, s = self.model(batch)
                for k, inst in enumerate(chunk):
                    results.append((
                        q[k, : inst.m, : inst.n].numpy().astype(float),
                        p[k, : inst.m].numpy().astype(float),
                        s[k, : inst.n].numpy().astype(float),
                    ))
        return results


class TradeReductionMechanism:
    name = "trm"

    def outcomes(self, instances):
        return [trade_reduction(inst) for inst in instances]


class RandomMatchingMechanism:
    """Pairings for instance k of a call depend only on (seed, k), never on
    the reports, so rescoring the same profile under a misreport reuses the
    pairing it had under truth."""

    name = "rm"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def outcomes(self, instances):
        out = []
        for k, inst in enumerate(instances):
            rng = np.random.default_rng([self.seed, k])
            out.append(random_matching(inst, rng))
        return out


def expected_profit(mechanism, cfg: MarketConfig, samples: int, start_index: int = 0):
    """Monte Carlo platform profit; returns (mean, standard error, ir_violations)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    instances = sample_batch(cfg, samples, start_index=start_index)
    profits = np.empty(samples)
    ir_violations = 0
    for k, (inst, (q, p, s)) in enumerate(zip(instances, mechanism.outcomes(instances))):
        profits[k] = p.sum() - s.sum()
        if (p > inst.bids * q.sum(axis=1) + IR_TOLERANCE).any() or (
            s < inst.asks * q.sum(axis=0) - IR_TOLERANCE
        ).any():
            ir_violations += 1
    se = profits.std(ddof=1) / np.sqrt(samples) if samples > 1 else 0.0
    return float(profits.mean()), float(se), ir_violations


def _side_violation(mechanism, instances, grid, agent_count, splice):
    """Worst expected misreport gain for one side via per-report averaging."""
    t = len(instances)
    worst = 0.0
    argmax = (0, grid[0], grid[0])
    for agent in range(agent_count):
        gain_units = np.zeros(len(grid))
        cost = np.zeros(len(grid))
        for g, r in enumerate(grid):
            modified = [splice(inst, agent, r) for inst in instances]
            for q, p, s in mechanism.outcomes(modified):
                units, paid = _agent_terms(q, p, s, agent, splice.side)
                gain_units[g] += units
                cost[g] += paid
        gain_units /= t
        cost /= t
        truthful = grid * gain_units - cost
        matrix = grid[:, None] * gain_units[None, :] - cost[None, :] - truthful[:, None]
        idx = np.unravel_index(np.argmax(matrix), matrix.shape)
        if matrix[idx] > worst:
            worst = float(matrix[idx])
            argmax = (agent, float(grid[idx[0]]), float(grid[idx[1]]))
    return worst, argmax


def _agent_terms(q, p, s, agent, side):
    if side == "consumer":
        return q[agent].sum(), p[agent]
    return -q[:, agent].sum(), -s[agent]


class _ConsumerSplice:
    side = "consumer"

    def __call__(self, inst, agent, report):
        reports = inst.bids.copy()
        reports[agent] = report
        return inst.with_bids(reports)


class _SupplierSplice:
    side = "supplier"

    def __call__(self, inst, agent, report):
        reports = inst.asks.copy()
        reports[agent] = report
        return inst.with_asks(reports)


def max_ic_violation(mechanism, cfg: MarketConfig, profiles: int = 1000,
                     grid_points: int = 16, refine_steps: int = 0,
                     refine_rate: float = 1e-3, start_index: int = 0):
    """Per-side worst expected misreport gain, floored at zero.

    ``refine_steps`` > 0 polishes the best grid cell with the gradient-based
    probe optimizer; it needs a differentiable adapter (NetMechanism) and is
    silently skipped for classical mechanisms.
    """
    if cfg.m_range[0] != cfg.m_range[1] or cfg.n_range[0] != cfg.n_range[1]:
        raise ValueError("IC metric needs a fixed-size market config")
    instances = sample_batch(cfg, profiles, start_index=start_index)
    grid = np.linspace(cfg.value_low, cfg.value_high, grid_points)

    ic_c, cell_c = _side_violation(mechanism, instances, grid, instances[0].m, _ConsumerSplice())
    ic_s, cell_s = _side_violation(mechanism, instances, grid, instances[0].n, _SupplierSplice())

    if refine_steps > 0 and isinstance(mechanism, NetMechanism):
        batch = MarketBatch.from_instances(instances)
        ic_c = max(ic_c, _refine_cell(mechanism.model, batch, cfg, cell_c, "consumer",
                                      refine_steps, refine_rate))
        ic_s = max(ic_s, _refine_cell(mechanism.model, batch, cfg, cell_s, "supplier",
                                      refine_steps, refine_rate))
    return max(0.0, ic_c), max(0.0, ic_s)


def _refine_cell(model, batch, cfg, cell, side, steps, rate):
    """Polish one grid cell's (agent, value, misreport) with gradient steps."""
    agent, value, misreport = cell
    m = batch.consumer_mask.shape[1]
    n = batch.supplier_mask.shape[1]
    probe = ICProbe.initial(m, n, cfg.value_low, cfg.value_high, np.random.default_rng(0))
    if side == "consumer":
        probe.bids = torch.full((m,), float(value))
        probe.bid_misreports = torch.full((m,), float(misreport))
        probe = probe.one_hot_consumer(agent)
    else:
        probe.asks = torch.full((n,), float(value))
        probe.ask_misreports = torch.full((n,), float(misreport))
        probe = probe.one_hot_supplier(agent)
    probe, gap_c, gap_s = optimize_probe(model, probe, batch, steps, rate,
                                         optimize_logits=False)
    return -(gap_c if side == "consumer" else gap_s)


def evaluate_mechanism(mechanism, cfg: MarketConfig, profit_samples: int = 10_000,
                       ic_profiles: int = 1000, grid_points: int = 16,
                       refine_steps: int = 0, ic_cfg: MarketConfig | None = None) -> EvalReport:
    """Full report: profit on ``cfg``, IC on ``ic_cfg`` (default: ``cfg``)."""
    profit, se, ir = expected_profit(mechanism, cfg, profit_samples)
    ic_c, ic_s = max_ic_violation(mechanism, ic_cfg or cfg, profiles=ic_profiles,
                                  grid_points=grid_points, refine_steps=refine_steps)
    return EvalReport(
        mechanism=getattr(mechanism, "name", type(mechanism).__name__),
        m_range=cfg.m_range,
        n_range=cfg.n_range,
        value_low=cfg.value_low,
        value_high=cfg.value_high,
        profit_mean=profit,
        profit_se=se,
        ic_consumer=ic_c,
        ic_supplier=ic_s,
        ir_violations=ir,
        samples=profit_samples,
        extra={"ic_profiles": ic_profiles, "grid_points": grid_points,
               "refine_steps": refine_steps},
    )


def fluctuation_variance(history: TrainHistory, burn_in_fraction: float = 1 / 6) -> FluctuationReport:
    """Sample variance (n-1 denominator) of trajectories past the burn-in cut."""
    if not 0 <= burn_in_fraction < 1:
        raise ValueError("burn_in_fraction must lie in [0, 1)")
    total = len(history)
    start = int(total * burn_in_fraction)
    if total - start < 2:
        raise ValueError("burn-in leaves fewer than two records")

    def var(name):
        return float(history.column(name)[start:].var(ddof=1))

    return FluctuationReport(
        profit_variance=var("profit"),
        consumer_hinge_variance=var("hinge_consumer"),
        supplier_hinge_variance=var("hinge_supplier"),
        burn_in_records=start,
        total_records=total,
    )


def generalization_eval(model, settings: list[MarketConfig], profit_samples: int = 1000,
                        ic_profiles: int = 200, grid_points: int = 8) -> list[EvalReport]:
    """Evaluate one trained model across market settings without retraining."""
    mech = NetMechanism(model)
    return [
        evaluate_mechanism(mech, cfg, profit_samples=profit_samples,
                           ic_profiles=ic_profiles, grid_points=grid_points)
        for cfg in settings
    ]


SWEEPABLE = ("penalty_weight", "arch.layers", "arch.hidden", "probe_steps",
             "update_rate", "probe_rate")


def sweep(train_cfg, param: str, values: list, eval_cfg: MarketConfig,
          profit_samples: int = 1000, ic_profiles: int = 200, grid_points: int = 8):
    """Train once per value (shared seed) and evaluate; returns [(value, report)]."""
    from .training import train

    if not values:
        raise ValueError("empty sweep value list")
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose one of {SWEEPABLE}")

    results = []
    for value in values:
        if param == "penalty_weight":
            cfg = replace(train_cfg, consumer_weight=value, supplier_weight=value)
        elif param.startswith("arch."):
            cfg = replace(train_cfg, arch=replace(train_cfg.arch, **{param[5:]: value}))
        else:
            cfg = replace(train_cfg, **{param: value})
        model, _ = train(cfg)
        report = evaluate_mechanism(NetMechanism(model), eval_cfg,
                                    profit_samples=profit_samples,
                                    ic_profiles=ic_profiles, grid_points=grid_points)
        report.extra["sweep_param"] = param
        report.extra["sweep_value"] = value
        results.append((value, report))
    return results
