import numpy as np
import pytest
import torch
from torch import nn

from damech.ic import ICProbe
from damech.market import MarketConfig, sample_batch
from damech.nets import (
    ArchConfig,
    AttentionMechanismNet,
    MarketBatch,
    MlpMechanismNet,
    clamp_payments,
    flatten_gradients,
    flatten_parameters,
    scale_allocation,
)
from damech.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingAbort,
    _seed_streams,
    build_model,
    profit_loss,
    train,
    train_step,
)

SMALL = ArchConfig(hidden=8, layers=1, heads=2)
TINY_MARKET = MarketConfig(m_range=(2, 2), n_range=(2, 2), seed=0)


def tiny_config(**overrides):
    base = dict(market=TINY_MARKET, arch=SMALL, epochs=2, updates_per_epoch=2,
                batch_size=2, probe_steps=2, seed=7)
    base.update(overrides)
    return TrainConfig(**base)


def zero_hinge_probe(rng):
    """Misreports equal the candidates, so both gaps vanish identically."""
    probe = ICProbe.initial(2, 2, 0.1, 1.0, rng)
    return ICProbe(
        bids=probe.bids, bid_misreports=probe.bids.clone(),
        bid_logits=probe.bid_logits,
        asks=probe.asks, ask_misreports=probe.asks.clone(),
        ask_logits=probe.ask_logits,
        value_low=0.1, value_high=1.0,
    )


class ReportScaledStub(nn.Module):
    """One-parameter mechanism whose payments track composed reports, so both
    hinges are strictly active for shaded bids / padded asks."""

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.zeros(1))

    def forward(self, batch):
        pair = (batch.consumer_mask.unsqueeze(-1) & batch.supplier_mask.unsqueeze(-2))
        q_raw = 0.1 * torch.sigmoid(self.scale) * pair.to(batch.bids.dtype)
        q = scale_allocation(q_raw, batch.demand, batch.supply)
        p, s = clamp_payments(batch.bids * 10.0, batch.asks * 0.0, q,
                              batch.bids, batch.asks)
        return q, p, s


def violating_probe(rng):
    """Bid shading plus ask padding: both hinges fire on ReportScaledStub."""
    probe = ICProbe.initial(2, 2, 0.1, 1.0, rng)
    return ICProbe(
        bids=torch.tensor([0.9, 0.8]), bid_misreports=torch.tensor([0.4, 0.3]),
        bid_logits=probe.bid_logits,
        asks=torch.tensor([0.2, 0.3]), ask_misreports=torch.tensor([0.7, 0.8]),
        ask_logits=probe.ask_logits,
        value_low=0.1, value_high=1.0,
    )


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(probe_rate=-1.0), dict(update_rate=-0.1), dict(batch_size=0),
        dict(epochs=0), dict(probe_steps=0), dict(updates_per_epoch=0),
        dict(ic_mode="exact"), dict(encoder_kind="cnn"),
        dict(consumer_weight=-0.5), dict(rsic_sample_count=0),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_defaults_match_training_setup(self):
        cfg = TrainConfig()
        assert cfg.epochs == 300 and cfg.updates_per_epoch == 40
        assert cfg.batch_size == 32 and cfg.probe_steps == 20
        assert cfg.probe_rate == 1e-3 and cfg.update_rate == 1e-4
        assert cfg.consumer_weight == 0.5 and cfg.supplier_weight == 0.5


class TestSeedStreams:
    def test_reproducible(self):
        a, b = _seed_streams(3), _seed_streams(3)
        assert a["market_seed"] == b["market_seed"]
        assert a["init_seed"] == b["init_seed"]
        assert a["probe_rng"].random() == b["probe_rng"].random()

    def test_streams_differ_across_seeds(self):
        assert _seed_streams(1)["market_seed"] != _seed_streams(2)["market_seed"]

    def test_streams_differ_from_each_other(self):
        s = _seed_streams(4)
        assert s["probe_rng"].random() != s["shuffle_rng"].random()


class TestBuildModel:
    def test_attention_default(self):
        model = build_model(tiny_config(), init_seed=1)
        assert isinstance(model, AttentionMechanismNet)

    def test_mlp_needs_fixed_sizes(self):
        assert isinstance(build_model(tiny_config(encoder_kind="mlp"), 1), MlpMechanismNet)
        with pytest.raises(ValueError):
            build_model(tiny_config(encoder_kind="mlp", market=MarketConfig(seed=0)), 1)


class TestProfitLoss:
    def test_fixed_payment_stub(self):
        class Stub(nn.Module):
            def forward(self, batch):
                m = batch.consumer_mask.to(batch.bids.dtype)
                n = batch.supplier_mask.to(batch.asks.dtype)
                return torch.zeros(batch.size, m.shape[1], n.shape[1]), m, 0.2 * n

        batch = MarketBatch.from_instances(sample_batch(MarketConfig(m_range=(3, 3), n_range=(2, 2), seed=1), 4))
        # profit per instance: 3 * 1.0 - 2 * 0.2
        assert profit_loss(Stub(), batch).item() == pytest.approx(-2.6)

    def test_no_trade_outcome_cannot_profit(self):
        class Idle(nn.Module):
            def forward(self, batch):
                m = batch.consumer_mask.to(batch.bids.dtype)
                n = batch.supplier_mask.to(batch.asks.dtype)
                return torch.zeros(batch.size, m.shape[1], n.shape[1]), 0.0 * m, 0.3 * n

        batch = MarketBatch.from_instances(sample_batch(TINY_MARKET, 4))
        assert profit_loss(Idle(), batch).item() == pytest.approx(0.6)


class TestTrainStep:
    def test_zero_hinge_step_is_pure_profit_descent(self):
        cfg = tiny_config(update_rate=1e-2)
        batch = MarketBatch.from_instances(sample_batch(TINY_MARKET, 2))
        probe = zero_hinge_probe(np.random.default_rng(1))

        model = AttentionMechanismNet(SMALL, seed=3)
        twin = AttentionMechanismNet(SMALL, seed=3)
        before = flatten_parameters(twin).astype(np.float64)
        profit_loss(twin, batch).backward()
        expected = (before - cfg.update_rate * flatten_gradients(twin)).astype(np.float32)

        record = train_step(model, probe, batch, cfg, np.random.default_rng(2), 0, 0)
        assert np.array_equal(flatten_parameters(model), expected)
        assert record.hinge_consumer == 0.0 and record.hinge_supplier == 0.0
        assert record.grad_norm_consumer == 0.0 and record.grad_norm_supplier == 0.0
        assert not record.conflict_profit_first and not record.conflict_mutual

    def test_zero_rate_leaves_parameters_alone(self):
        cfg = tiny_config(update_rate=0.0)
        batch = MarketBatch.from_instances(sample_batch(TINY_MARKET, 2))
        model = AttentionMechanismNet(SMALL, seed=4)
        before = flatten_parameters(model)
        train_step(model, zero_hinge_probe(np.random.default_rng(3)), batch, cfg,
                   np.random.default_rng(4), 0, 0)
        assert np.array_equal(flatten_parameters(model), before)

    def test_disabled_surgery_applies_weighted_sum(self):
        cfg = tiny_config(update_rate=1e-2, gce_enabled=False,
                          consumer_weight=0.5, supplier_weight=0.5)
        batch = MarketBatch.from_instances(sample_batch(TINY_MARKET, 2))
        probe = violating_probe(np.random.default_rng(5))

        def grad_of(value, net):
            net.zero_grad(set_to_none=True)
            value.backward()
            out = flatten_gradients(net)
            net.zero_grad(set_to_none=True)
            return out

        from damech.ic import consumer_ic_gap, supplier_ic_gap

        twin = ReportScaledStub()
        g0 = grad_of(profit_loss(twin, batch), twin)
        g1 = grad_of(torch.clamp(-consumer_ic_gap(twin, probe, batch), min=0), twin)
        g2 = grad_of(torch.clamp(-supplier_ic_gap(twin, probe, batch), min=0), twin)
        assert np.linalg.norm(g1) > 0 and np.linalg.norm(g2) > 0
        before = flatten_parameters(twin).astype(np.float64)
        expected = (before - cfg.update_rate * (g0 + 0.5 * g1 + 0.5 * g2)).astype(np.float32)

        model = ReportScaledStub()
        rng = np.random.default_rng(6)
        record = train_step(model, probe, batch, cfg, rng, 0, 0)
        assert np.array_equal(flatten_parameters(model), expected)
        assert record.hinge_consumer > 0 and record.hinge_supplier > 0
        assert not record.order_swapped
        # surgery disabled: the shuffle stream must not advance
        assert rng.random() == np.random.default_rng(6).random()

    def test_surgery_consumes_one_shuffle_draw(self):
        cfg = tiny_config()
        batch = MarketBatch.from_instances(sample_batch(TINY_MARKET, 2))
        rng = np.random.default_rng(8)
        train_step(AttentionMechanismNet(SMALL, seed=5), zero_hinge_probe(np.random.default_rng(7)),
                   batch, cfg, rng, 0, 0)
        reference = np.random.default_rng(8)
        reference.random()
        assert rng.random() == reference.random()

    def test_non_finite_gradients_raise(self):
        model = AttentionMechanismNet(SMALL, seed=6)
        with torch.no_grad():
            model.pair_bias.fill_(float("nan"))
        batch = MarketBatch.from_instances(sample_batch(TINY_MARKET, 2))
        with pytest.raises(ValueError, match="non-finite"):
            train_step(model, zero_hinge_probe(np.random.default_rng(9)), batch,
                       tiny_config(), np.random.default_rng(10), 0, 0)


class TestTrainLoop:
    def test_history_covers_every_update(self):
        model, history = train(tiny_config())
        assert len(history) == 4
        assert [(r.epoch, r.update) for r in history.records] == \
            [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert set(HISTORY_COLUMNS) == set(vars(history.records[0]))

    def test_bitwise_reproducible(self):
        model_a, hist_a = train(tiny_config())
        model_b, hist_b = train(tiny_config())
        assert np.array_equal(flatten_parameters(model_a), flatten_parameters(model_b))
        assert hist_a.rows() == hist_b.rows()

    def test_seed_changes_the_run(self):
        model_a, _ = train(tiny_config())
        model_b, _ = train(tiny_config(seed=8))
        assert not np.array_equal(flatten_parameters(model_a), flatten_parameters(model_b))

    def test_random_sampling_mode_runs(self):
        _, history = train(tiny_config(ic_mode="random_sampling", rsic_sample_count=3))
        assert len(history) == 4

    def test_mlp_encoder_trains(self):
        model, history = train(tiny_config(encoder_kind="mlp"))
        assert isinstance(model, MlpMechanismNet)
        assert len(history) == 4

    def test_checkpoint_cadence(self, tmp_path):
        train(tiny_config(checkpoint_every=1), checkpoint_dir=str(tmp_path))
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["checkpoint.ckpt", "epoch-0001.ckpt", "epoch-0002.ckpt"]

    def test_abort_carries_partial_history(self, monkeypatch):
        class Exploding(nn.Module):
            def __init__(self):
                super().__init__()
                self.w = nn.Parameter(torch.ones(1))

            def forward(self, batch):
                m = batch.consumer_mask.shape[1]
                n = batch.supplier_mask.shape[1]
                bad = self.w * torch.nan
                return (bad.expand(batch.size, m, n), bad.expand(batch.size, m),
                        bad.expand(batch.size, n))

        monkeypatch.setattr("damech.training.build_model", lambda cfg, seed: Exploding())
        with pytest.raises(TrainingAbort) as info:
            train(tiny_config())
        assert len(info.value.history) == 0
