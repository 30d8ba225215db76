import json

import numpy as np
import pytest

from damech.cli import DEFAULT_CONFIG, main
from damech.fileio import read_history_csv, write_history_csv
from damech.training import TrainHistory, TrainRecord

TINY = {
    "seed": 3,
    "market": {"m_range": [2, 2], "n_range": [2, 2]},
    "model": {"hidden": 8, "layers": 1, "heads": 2},
    "train": {"epochs": 1, "updates_per_epoch": 2, "batch_size": 2, "probe_steps": 1},
    "eval": {"profit_samples": 20, "ic_profiles": 6, "grid_points": 4},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run_train(tmp_path, config_path, out="run", extra=()):
    out_dir = tmp_path / out
    code = main(["train", "--config", config_path, "--out", str(out_dir), *extra])
    return code, out_dir


class TestTrainCommand:
    def test_writes_all_artifacts(self, tmp_path, config_path):
        code, out = run_train(tmp_path, config_path)
        assert code == 0
        assert (out / "checkpoint.ckpt").exists()
        assert (out / "config.resolved.json").exists()
        history = (out / "history.csv").read_text().splitlines()
        assert len(history) == 3  # header + epochs * updates

    def test_resolved_config_reflects_merges_and_flags(self, tmp_path, config_path):
        _, out = run_train(tmp_path, config_path,
                           extra=["--no-gce", "--override", "train.epochs=2"])
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["model"]["hidden"] == 8
        assert resolved["train"]["epochs"] == 2
        assert resolved["train"]["gce_enabled"] is False
        assert resolved["format_version"] == DEFAULT_CONFIG["format_version"]

    def test_same_seed_same_bytes(self, tmp_path, config_path):
        _, out_a = run_train(tmp_path, config_path, out="a")
        _, out_b = run_train(tmp_path, config_path, out="b")
        _, out_c = run_train(tmp_path, config_path, out="c", extra=["--seed", "9"])
        bytes_a = (out_a / "checkpoint.ckpt").read_bytes()
        assert bytes_a == (out_b / "checkpoint.ckpt").read_bytes()
        assert bytes_a != (out_c / "checkpoint.ckpt").read_bytes()
        assert (out_a / "history.csv").read_bytes() == (out_b / "history.csv").read_bytes()


class TestEvalCommand:
    def test_eval_after_train(self, tmp_path, config_path, capsys):
        _, out = run_train(tmp_path, config_path)
        code = main(["eval", "--config", config_path, "--out", str(out),
                     "--checkpoint", str(out / "checkpoint.ckpt")])
        assert code == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["command"] == "eval"
        assert payload["seed"] == 3
        assert payload["report"]["mechanism"] == "model"
        assert payload["report"]["samples"] == 20
        assert "profit" in capsys.readouterr().out

    def test_missing_checkpoint_is_io_failure(self, tmp_path, config_path):
        code = main(["eval", "--config", config_path, "--out", str(tmp_path),
                     "--checkpoint", str(tmp_path / "nope.ckpt")])
        assert code == 4


class TestBaselineCommand:
    @pytest.mark.parametrize("kind", ["trm", "rm"])
    def test_known_kinds(self, tmp_path, config_path, kind):
        code = main(["baseline", "--kind", kind, "--config", config_path,
                     "--out", str(tmp_path)])
        assert code == 0
        payload = json.loads((tmp_path / f"metrics-{kind}.json").read_text())
        assert payload["report"]["mechanism"] == kind
        assert payload["report"]["ir_violations"] == 0

    def test_unknown_kind(self, tmp_path, config_path):
        assert main(["baseline", "--kind", "vcg", "--config", config_path,
                     "--out", str(tmp_path)]) == 2

    def test_eval_size_pinning(self, tmp_path, config_path):
        code = main(["baseline", "--kind", "trm", "--config", config_path,
                     "--out", str(tmp_path), "--override", "eval.m=3"])
        assert code == 0
        payload = json.loads((tmp_path / "metrics-trm.json").read_text())
        assert payload["report"]["m_range"] == [3, 3]
        assert payload["report"]["n_range"] == [3, 3]


class TestCompareCommand:
    def test_joins_metrics_files(self, tmp_path, config_path, capsys):
        main(["baseline", "--kind", "trm", "--config", config_path, "--out", str(tmp_path)])
        main(["baseline", "--kind", "rm", "--config", config_path, "--out", str(tmp_path)])
        capsys.readouterr()
        table_path = tmp_path / "table.txt"
        code = main(["compare", str(tmp_path / "metrics-trm.json"),
                     str(tmp_path / "metrics-rm.json"), "--out", str(table_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "trm" in out and "rm" in out
        assert table_path.read_text() == out

    def test_missing_metrics_file(self, tmp_path):
        assert main(["compare", str(tmp_path / "absent.json")]) == 4

    def test_malformed_metrics_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["compare", str(bad)]) == 2


class TestConfigHandling:
    def test_malformed_config_reports_location(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{"seed": }')
        code = main(["train", "--config", str(path), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "broken.json:1:" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "extra.json"
        path.write_text(json.dumps({"learning_rate": 0.1}))
        code = main(["train", "--config", str(path), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "unknown config key: learning_rate" in capsys.readouterr().err

    def test_non_object_config_rejected(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "x")]) == 2

    @pytest.mark.parametrize("spec", ["no_equals_sign", "bogus.path=1", "train.lr=0.1"])
    def test_bad_overrides(self, tmp_path, config_path, spec):
        assert main(["train", "--config", config_path, "--out", str(tmp_path / "x"),
                     "--override", spec]) == 2

    def test_invalid_market_values_are_config_errors(self, tmp_path, config_path):
        assert main(["train", "--config", config_path, "--out", str(tmp_path / "x"),
                     "--override", "market.value_low=2.0"]) == 2


class TestSweepCommand:
    def test_unknown_param(self, tmp_path, config_path):
        assert main(["sweep", "--param", "dropout", "--values", "[0.1]",
                     "--config", config_path, "--out", str(tmp_path)]) == 2

    def test_values_must_be_json_list(self, tmp_path, config_path):
        assert main(["sweep", "--param", "penalty_weight", "--values", "0.5",
                     "--config", config_path, "--out", str(tmp_path)]) == 2

    def test_tiny_sweep(self, tmp_path, config_path, capsys):
        code = main(["sweep", "--param", "penalty_weight", "--values", "[0.0, 1.0]",
                     "--config", config_path, "--out", str(tmp_path)])
        assert code == 0
        payload = json.loads((tmp_path / "sweep.json").read_text())
        assert [r["value"] for r in payload["results"]] == [0.0, 1.0]
        tsv = (tmp_path / "sweep.tsv").read_text().splitlines()
        assert tsv[0].startswith("penalty_weight\t")
        assert len(tsv) == 3


class TestHistoryCsv:
    def test_round_trip_preserves_types(self, tmp_path):
        record = TrainRecord(epoch=1, update=2, profit=0.125, gap_consumer=-0.5,
                             gap_supplier=0.0, hinge_consumer=0.5, hinge_supplier=0.0,
                             grad_norm_profit=1.5, grad_norm_consumer=0.0,
                             grad_norm_supplier=0.0, conflict_profit_first=True,
                             conflict_profit_second=False, conflict_mutual=False,
                             order_swapped=True)
        path = tmp_path / "history.csv"
        write_history_csv(path, TrainHistory(records=[record]))
        loaded = read_history_csv(path)
        assert loaded.records == [record]

    def test_rejects_foreign_header(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_history_csv(path)
