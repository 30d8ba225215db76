"""Training loop: sample markets, hunt misreports, update under conflict surgery.

Each epoch runs three phases. Phase 1 draws a fresh batch of markets. Phase 2
rebuilds the misreport probe, seeding it at the most violating of a set of
random one-hot draws, then descends both IC gaps for a fixed number of inner
steps (the random-sampling ablation keeps the seed draw and skips the
descent). Phase 3 runs a
fixed number of parameter updates: the negated-profit gradient and the two
hinge-penalty gradients are computed against the frozen probe, conflicting
directions are projected out (unless disabled for ablation), and the merged
direction is applied with plain gradient descent.

All randomness flows from one root seed, split into named child streams
(market sampling, probe initialization, the surgery shuffle, parameter
initialization, ablation sampling) so runs are bitwise reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .ic import ICProbe, consumer_ic_gap, optimize_probe, rsic_gaps, supplier_ic_gap
from .market import MarketConfig, sample_batch
from .nets import (
    ArchConfig,
    AttentionMechanismNet,
    MarketBatch,
    MlpMechanismNet,
    flatten_gradients,
    flatten_parameters,
    load_flat_parameters,
)
from .surgery import ConflictFlags, GradientSet, eliminate_conflicts, merge

IC_MODES = ("adversarial", "random_sampling")
ENCODER_KINDS = ("attention", "mlp")


@dataclass(frozen=True)
class TrainConfig:
    market: MarketConfig = MarketConfig()
    arch: ArchConfig = ArchConfig()
    encoder_kind: str = "attention"
    consumer_weight: float = 0.5
    supplier_weight: float = 0.5
    probe_rate: float = 1e-3
    update_rate: float = 1e-4
    probe_steps: int = 20
    epochs: int = 300
    updates_per_epoch: int = 40
    batch_size: int = 32
    seed: int = 0
    gce_enabled: bool = True
    ic_mode: str = "adversarial"
    rsic_sample_count: int = 20
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.probe_rate < 0 or self.update_rate < 0:
            raise ValueError("learning rates must be nonnegative")
        if min(self.probe_steps, self.epochs, self.updates_per_epoch, self.batch_size) < 1:
            raise ValueError("probe_steps, epochs, updates_per_epoch, batch_size must be >= 1")
        if self.ic_mode not in IC_MODES:
            raise ValueError(f"ic_mode must be one of {IC_MODES}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.consumer_weight < 0 or self.supplier_weight < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.rsic_sample_count < 1:
            raise ValueError("rsic_sample_count must be >= 1")


@dataclass
class TrainRecord:
    epoch: int
    update: int
    profit: float
    gap_consumer: float
    gap_supplier: float
    hinge_consumer: float
    hinge_supplier: float
    grad_norm_profit: float
    grad_norm_consumer: float
    grad_norm_supplier: float
    conflict_profit_first: bool
    conflict_profit_second: bool
    conflict_mutual: bool
    order_swapped: bool


HISTORY_COLUMNS = tuple(TrainRecord.__dataclass_fields__)


@dataclass
class TrainHistory:
    records: list[TrainRecord] = field(default_factory=list)

    def rows(self):
        return [[getattr(r, c) for c in HISTORY_COLUMNS] for r in self.records]

    def column(self, name: str) -> np.ndarray:
        if name not in HISTORY_COLUMNS:
            raise KeyError(name)
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def __len__(self):
        return len(self.records)


class TrainingAbort(RuntimeError):
    """Raised on non-finite gradients; carries the partial history."""

    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def _seed_streams(seed: int):
    """Fixed-order child streams of the root seed."""
    children = np.random.SeedSequence(seed).spawn(5)
    market, probe, shuffle, init, rsic = children
    return {
        "market_seed": int(market.generate_state(1, np.uint64)[0]),
        "probe_rng": np.random.default_rng(probe),
        "shuffle_rng": np.random.default_rng(shuffle),
        "init_seed": int(init.generate_state(1, np.uint64)[0] >> 1),
        "rsic_rng": np.random.default_rng(rsic),
    }


def build_model(cfg: TrainConfig, init_seed: int):
    if cfg.encoder_kind == "attention":
        return AttentionMechanismNet(cfg.arch, seed=init_seed)
    mr, nr = cfg.market.m_range, cfg.market.n_range
    if mr[0] != mr[1] or nr[0] != nr[1]:
        raise ValueError("the MLP encoder needs a fixed-size market")
    return MlpMechanismNet(mr[0], nr[0], hidden=cfg.arch.hidden, layers=cfg.arch.layers,
                           seed=init_seed)


def profit_loss(model, batch: MarketBatch) -> torch.Tensor:
    """Negated mean platform profit over the batch."""
    _, p, s = model(batch)
    return -(p.sum(dim=-1) - s.sum(dim=-1)).mean()


def _objective_gradient(model, value: torch.Tensor) -> np.ndarray:
    model.zero_grad(set_to_none=True)
    value.backward()
    grad = flatten_gradients(model)
    model.zero_grad(set_to_none=True)
    return grad


def train_step(model, probe: ICProbe, batch: MarketBatch, cfg: TrainConfig,
               shuffle_rng: np.random.Generator, epoch: int, update: int) -> TrainRecord:
    """One Phase-3 parameter update against a frozen probe."""
    loss0 = profit_loss(model, batch)
    g_profit = _objective_gradient(model, loss0)

    gap_c = consumer_ic_gap(model, probe, batch)
    hinge_c = torch.clamp(-gap_c, min=0.0)
    g_consumer = (
        _objective_gradient(model, hinge_c) if hinge_c.item() > 0.0
        else np.zeros_like(g_profit)
    )

    gap_s = supplier_ic_gap(model, probe, batch)
    hinge_s = torch.clamp(-gap_s, min=0.0)
    g_supplier = (
        _objective_gradient(model, hinge_s) if hinge_s.item() > 0.0
        else np.zeros_like(g_profit)
    )

    for name, g in (("profit", g_profit), ("consumer", g_consumer), ("supplier", g_supplier)):
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite {name} gradient at epoch {epoch} update {update}")

    gset = GradientSet(
        profit=g_profit,
        consumer_ic=g_consumer,
        supplier_ic=g_supplier,
        consumer_weight=cfg.consumer_weight,
        supplier_weight=cfg.supplier_weight,
    )
    if cfg.gce_enabled:
        gset, flags = eliminate_conflicts(gset, shuffle_rng)
    else:
        flags = ConflictFlags()
    total = merge(gset)

    params = flatten_parameters(model).astype(np.float64)
    load_flat_parameters(model, (params - cfg.update_rate * total).astype(np.float32))

    return TrainRecord(
        epoch=epoch,
        update=update,
        profit=-loss0.item(),
        gap_consumer=gap_c.item(),
        gap_supplier=gap_s.item(),
        hinge_consumer=hinge_c.item(),
        hinge_supplier=hinge_s.item(),
        grad_norm_profit=float(np.linalg.norm(g_profit)),
        grad_norm_consumer=float(np.linalg.norm(g_consumer)),
        grad_norm_supplier=float(np.linalg.norm(g_supplier)),
        conflict_profit_first=flags.profit_first,
        conflict_profit_second=flags.profit_second,
        conflict_mutual=flags.penalties_mutual,
        order_swapped=flags.order_swapped,
    )


def build_probe(model, batch: MarketBatch, cfg: TrainConfig, epoch: int,
                rng: np.random.Generator):
    """Fresh misreport probe for one epoch's updates.

    Adversarial mode seeds at the worst of rsic_sample_count one-hot draws
    (a flat selector dilutes per-agent utility differences quadratically, so
    refinement from a uniform start misses the real violations) and then
    descends both gaps. Random-sampling mode keeps the best draws as-is.
    """
    if cfg.ic_mode != "adversarial":
        probe, _, _ = rsic_gaps(model, batch, cfg.rsic_sample_count, rng)
        return probe
    fresh, _, _ = rsic_gaps(model, batch, cfg.rsic_sample_count, rng)
    probe, _, _ = optimize_probe(model, fresh, batch, cfg.probe_steps, cfg.probe_rate)
    return probe


def train(cfg: TrainConfig, checkpoint_dir: str | None = None):
    """Run the full loop; returns (model, history).

    Raises TrainingAbort (history attached) if a gradient goes non-finite.
    """
    streams = _seed_streams(cfg.seed)
    market_cfg = replace(cfg.market, seed=streams["market_seed"])
    model = build_model(cfg, streams["init_seed"])
    history = TrainHistory()

    def checkpoint(name):
        if checkpoint_dir is not None:
            save_checkpoint(os.path.join(checkpoint_dir, name), model,
                            meta={"seed": cfg.seed, "epochs_done": epoch + 1})

    epoch = -1
    try:
        for epoch in range(cfg.epochs):
            instances = sample_batch(market_cfg, cfg.batch_size,
                                     start_index=epoch * cfg.batch_size)
            batch = MarketBatch.from_instances(instances)

            rng = streams["probe_rng" if cfg.ic_mode == "adversarial" else "rsic_rng"]
            probe = build_probe(model, batch, cfg, epoch, rng)

            for update in range(cfg.updates_per_epoch):
                try:
                    record = train_step(model, probe, batch, cfg,
                                        streams["shuffle_rng"], epoch, update)
                except ValueError as exc:
                    raise TrainingAbort(str(exc), history) from exc
                history.records.append(record)

            if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint(f"epoch-{epoch + 1:04d}.ckpt")
    except TrainingAbort:
        checkpoint("aborted.ckpt")
        raise

    checkpoint("checkpoint.ckpt")
    return model, history
