import json

import pytest
import yaml

from gazeclr import cli
from gazeclr.config import RunConfig, SEED_ENV_VAR
from gazeclr.data import load_manifest, synth_generate
from gazeclr.evaluation import load_report, save_diagnostics, embed_diagnostics
from gazeclr.exceptions import ConfigError, DivergenceError
from gazeclr.model import EncoderConfig, GazeClrModel, ProjectionHeadConfig
from gazeclr.training import TrainConfig, pretrain, write_trace

SMALL_SETS = [
    "--set", "model.architecture=tinycnn",
    "--set", "model.feature_dim=16",
    "--set", "model.input_size=64",
    "--set", "model.proj_hidden=32",
    "--set", "model.proj_out=12",
    "--set", "train.iterations=2",
    "--set", "train.batch_size=4",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    synth_generate(out, n_participants=2, groups_per_participant=8, views=2,
                   image_size=64, seed=31)
    return out


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory, data_dir):
    from gazeclr.model import save_checkpoint

    manifest = load_manifest(data_dir)
    model = GazeClrModel(
        EncoderConfig.tiny(feature_dim=16),
        ProjectionHeadConfig(hidden_dim=32, out_dim=12),
        seed=7,
    )
    result = pretrain(manifest, model, TrainConfig(iterations=0, batch_size=4, seed=7))
    out = tmp_path_factory.mktemp("cli_ckpt") / "init.ckpt"
    return save_checkpoint(result.checkpoint, out)


class TestConfig:
    def test_defaults_resolve(self):
        cfg = RunConfig.load()
        assert cfg.seed == 0
        assert cfg.train_config().lr == 0.03
        assert cfg.encoder_config().architecture == "resnet18"

    def test_unknown_key_names_path(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("train:\n  lrr: 0.1\n")
        with pytest.raises(ConfigError, match="train.lrr"):
            RunConfig.load(f)

    def test_set_override_and_type_check(self):
        cfg = RunConfig.load(sets=["train.iterations=7", "eval.shots=[1, 5]"])
        assert cfg.section("train")["iterations"] == 7
        assert cfg.section("eval")["shots"] == [1, 5]
        with pytest.raises(ConfigError, match="train.lr"):
            RunConfig.load(sets=["train.lr=banana"])
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig.load(sets=["train.nope=1"])

    def test_seed_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "11")
        assert RunConfig.load().seed == 11
        f = tmp_path / "c.yaml"
        f.write_text("seed: 22\n")
        assert RunConfig.load(f).seed == 22
        assert RunConfig.load(f, seed=33).seed == 33
        monkeypatch.delenv(SEED_ENV_VAR)
        assert RunConfig.load().seed == 0

    def test_snapshot_round_trip(self, tmp_path):
        cfg = RunConfig.load(sets=["train.tau=0.5"], seed=9, out=tmp_path)
        path = cfg.snapshot()
        tree = yaml.safe_load(path.read_text())
        assert tree["train"]["tau"] == 0.5
        assert tree["seed"] == 9


class TestSynthCmd:
    def test_generates_dataset_and_snapshot(self, tmp_path):
        out = tmp_path / "ds"
        rc = cli.main([
            "synth", "--out", str(out), "--participants", "2", "--groups", "3",
            "--views", "2", "--size", "64", "--seed", "5",
        ])
        assert rc == 0
        manifest = load_manifest(out)
        assert len(manifest.records) == 2 * 3 * 2
        assert (out / "config.snapshot").exists()

    def test_same_seed_same_manifest(self, tmp_path):
        args = ["synth", "--participants", "2", "--groups", "2", "--views", "2",
                "--size", "64", "--seed", "8"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()

    def test_too_few_views_is_data_error(self, tmp_path):
        rc = cli.main(["synth", "--out", str(tmp_path / "x"), "--views", "1",
                       "--participants", "1", "--groups", "2"])
        assert rc == 4

    def test_unwritable_out(self, tmp_path):
        blocker = tmp_path / "occupied"
        blocker.write_text("a file, not a directory")
        rc = cli.main(["synth", "--out", str(blocker / "sub"), "--participants", "1",
                       "--groups", "2", "--views", "2"])
        assert rc == 4


class TestPretrainCmd:
    def test_missing_data_is_usage_error(self, tmp_path):
        rc = cli.main(["pretrain", "--out", str(tmp_path)])
        assert rc == 2

    def test_equiv_run_layout_and_metadata(self, tmp_path, data_dir):
        out = tmp_path / "run"
        rc = cli.main([
            "pretrain", "--data", str(data_dir), "--variant", "equiv",
            "--out", str(out), "--seed", "3", *SMALL_SETS,
        ])
        assert rc == 0
        assert (out / "config.snapshot").exists()
        assert (out / "checkpoints" / "pretrain_final.ckpt").exists()
        trace = (out / "traces" / "pretrain.jsonl").read_text().strip().splitlines()
        assert len(trace) == 2
        meta = json.loads((out / "reports" / "pretrain_meta.json").read_text())
        assert meta["variant"] == "equiv"
        # the Equiv variant must not form single-view (augmentation) pairs
        assert meta["stats"]["single_view_pairs"] == 0
        assert meta["stats"]["multi_view_pairs"] > 0

    def test_resume_from_init(self, tmp_path, data_dir, ckpt_path):
        out = tmp_path / "resumed"
        rc = cli.main([
            "pretrain", "--data", str(data_dir), "--variant", "equiv",
            "--init", str(ckpt_path), "--out", str(out), "--seed", "3", *SMALL_SETS,
        ])
        assert rc == 0
        meta = json.loads((out / "reports" / "pretrain_meta.json").read_text())
        assert meta["init"] == str(ckpt_path)

    def test_bad_config_key_exits_3(self, tmp_path, data_dir, capsys):
        rc = cli.main([
            "pretrain", "--data", str(data_dir), "--out", str(tmp_path / "x"),
            "--set", "train.learning_rate=0.1",
        ])
        assert rc == 3
        assert "train.learning_rate" in capsys.readouterr().err

    def test_divergence_exits_5(self, tmp_path, data_dir, monkeypatch):
        def blow_up(*args, **kwargs):
            raise DivergenceError("loss diverged at step 1: loss=inf", step=1)

        monkeypatch.setattr("gazeclr.cli.pretrain", blow_up)
        rc = cli.main([
            "pretrain", "--data", str(data_dir), "--out", str(tmp_path / "d"), *SMALL_SETS,
        ])
        assert rc == 5


class TestEvalCmd:
    def test_unknown_protocol_is_usage_error(self, tmp_path, ckpt_path, data_dir):
        rc = cli.main([
            "eval", "--protocol", "zeroshot", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--out", str(tmp_path),
        ])
        assert rc == 2

    def test_llt_dispatch_round_trip(self, tmp_path, ckpt_path, data_dir):
        out = tmp_path / "llt"
        rc = cli.main([
            "eval", "--protocol", "llt", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--shots", "3", "--runs", "1",
            "--seed", "2", "--out", str(out),
        ])
        assert rc == 0
        report = load_report(out / "reports" / "llt_k3.json")
        assert report.protocol == "llt" and report.k == 3 and report.seed == 2
        summary = (out / "reports" / "llt_summary.csv").read_text().splitlines()
        assert summary[0] == "protocol,k,mean_deg,std_deg"
        assert len(summary) == 2

    def test_llt_reproducible_outputs(self, tmp_path, ckpt_path, data_dir):
        args = [
            "eval", "--protocol", "llt", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--shots", "3,5", "--runs", "2", "--seed", "4",
        ]
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        for rel in ("reports/llt_k3.json", "reports/llt_k5.json", "reports/llt_summary.csv"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_ft_dispatch(self, tmp_path, ckpt_path, data_dir):
        out = tmp_path / "ft"
        rc = cli.main([
            "eval", "--protocol", "ft", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--shots", "3", "--runs", "1", "--mode", "frozen",
            "--seed", "2", "--out", str(out),
            "--set", "train.ft_epochs=1", "--set", "train.ft_batch_size=8",
        ])
        assert rc == 0
        report = load_report(out / "reports" / "ft_k3.json")
        assert report.protocol == "ft"
        assert report.notes["mode"] == "frozen"

    def test_within_needs_val_data(self, tmp_path, ckpt_path, data_dir, capsys):
        rc = cli.main([
            "eval", "--protocol", "within", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--out", str(tmp_path),
        ])
        assert rc == 2
        assert "--val-data" in capsys.readouterr().err

    def test_within_dispatch(self, tmp_path, ckpt_path, data_dir):
        out = tmp_path / "within"
        rc = cli.main([
            "eval", "--protocol", "within", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--val-data", str(data_dir),
            "--fractions", "0.5,1.0", "--seed", "2", "--out", str(out),
            "--set", "train.ft_epochs=1", "--set", "train.ft_batch_size=8",
        ])
        assert rc == 0
        report = load_report(out / "reports" / "within.json")
        assert report.notes["fractions"] == [0.5, 1.0]
        summary = (out / "reports" / "within_summary.csv").read_text().splitlines()
        assert len(summary) == 3

    def test_env_seed_fallback(self, tmp_path, ckpt_path, data_dir, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "77")
        out = tmp_path / "env"
        rc = cli.main([
            "eval", "--protocol", "llt", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--shots", "3", "--runs", "1", "--out", str(out),
        ])
        assert rc == 0
        assert load_report(out / "reports" / "llt_k3.json").seed == 77


class TestDiagCmd:
    def test_writes_bundle(self, tmp_path, ckpt_path, data_dir):
        out = tmp_path / "diag"
        rc = cli.main([
            "diag", "--ckpt", str(ckpt_path), "--data", str(data_dir),
            "--mode", "encoder", "--max-samples", "24", "--pairs", "40",
            "--seed", "1", "--out", str(out),
        ])
        assert rc == 0
        obj = json.loads((out / "reports" / "diagnostics.json").read_text())
        assert obj["mode"] == "encoder"
        assert len(obj["projection"]) == 24


class TestPlotCmd:
    def test_no_inputs_is_usage_error(self, tmp_path, capsys):
        rc = cli.main(["plot", "--out", str(tmp_path)])
        assert rc == 2
        assert "--trace" in capsys.readouterr().err

    def test_trace_plot_and_table(self, tmp_path):
        trace = [{"step": i, "loss": 3.0 - 0.1 * i, "lr": 0.03} for i in range(5)]
        trace_path = write_trace(trace, tmp_path / "t.jsonl")
        out = tmp_path / "out"
        rc = cli.main(["plot", "--trace", str(trace_path), "--out", str(out)])
        assert rc == 0
        assert (out / "plots" / "loss_curve.png").exists()
        table = (out / "plots" / "loss_curve.csv").read_text().splitlines()
        assert table[0] == "step,loss,lr"
        assert len(table) == 6

    def test_empty_trace_is_error(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        rc = cli.main(["plot", "--trace", str(empty), "--out", str(tmp_path / "o")])
        assert rc == 4
        assert "empty trace" in capsys.readouterr().err

    def test_malformed_trace_reports_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"step": 0, "loss": 1.0, "lr": 0.1}\nnot json at all{\n')
        rc = cli.main(["plot", "--trace", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 4
        assert "line 2" in capsys.readouterr().err

    def test_single_report_single_bar_group(self, tmp_path, ckpt_path, data_dir):
        eval_out = tmp_path / "e"
        assert cli.main([
            "eval", "--protocol", "llt", "--ckpt", str(ckpt_path),
            "--data", str(data_dir), "--shots", "3", "--runs", "1",
            "--seed", "2", "--out", str(eval_out),
        ]) == 0
        out = tmp_path / "p"
        rc = cli.main([
            "plot", "--report", str(eval_out / "reports" / "llt_k3.json"),
            "--out", str(out),
        ])
        assert rc == 0
        table = (out / "plots" / "mae_vs_shots.csv").read_text().splitlines()
        assert len(table) == 2  # header + the one shot setting

    def test_diagnostics_plot(self, tmp_path, ckpt_path, data_dir):
        from gazeclr.model import load_checkpoint

        bundle = embed_diagnostics(
            load_checkpoint(ckpt_path), load_manifest(data_dir),
            mode="encoder", seed=0, max_samples=24, n_pairs=40,
        )
        diag_path = save_diagnostics(bundle, tmp_path / "diag.json")
        out = tmp_path / "plots_out"
        rc = cli.main(["plot", "--diagnostics", str(diag_path), "--out", str(out)])
        assert rc == 0
        assert (out / "plots" / "embedding_scatter.csv").exists()
        assert (out / "plots" / "pog_distance.csv").exists()

    def test_plot_deterministic_tables(self, tmp_path):
        trace = [{"step": i, "loss": 2.0 / (i + 1), "lr": 0.01} for i in range(4)]
        trace_path = write_trace(trace, tmp_path / "t.jsonl")
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["plot", "--trace", str(trace_path), "--out", str(a)]) == 0
        assert cli.main(["plot", "--trace", str(trace_path), "--out", str(b)]) == 0
        csv_a = (a / "plots" / "loss_curve.csv").read_bytes()
        assert csv_a == (b / "plots" / "loss_curve.csv").read_bytes()
