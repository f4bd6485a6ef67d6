import json
from pathlib import Path

import pytest

from critvae.cli import main
from critvae.dataio import RawInteraction
from critvae.synthetic import planted_clusters


def write_corpus(path, n_users=16, n_items=12, n_keyphrases=6, seed=0):
    records = planted_clusters(
        n_users=n_users,
        n_items=n_items,
        n_keyphrases=n_keyphrases,
        positives_per_user=6,
        keyphrases_per_item=2,
        seed=seed,
    )
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "user": r.user_id,
                        "item": r.item_id,
                        "rating": r.rating,
                        "keyphrases": r.keyphrases,
                    }
                )
                + "\n"
            )
    return records


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare -> train -> build-critiques -> train-blender, tiny scale."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus.jsonl"
    write_corpus(corpus)
    data_dir = root / "data"
    model_dir = root / "model"
    crit_dir = root / "critiques"
    blend_dir = root / "blender"

    assert main([
        "prepare", "--input", str(corpus), "--threshold", "4.5",
        "--ratios", "0.5,0.25,0.25", "--seed", "1", "--out", str(data_dir),
    ]) == 0
    assert main([
        "train", "--variant", "mmsplus", "--data", str(data_dir),
        "--latent-dim", "4", "--epochs", "2", "--batch-size", "8",
        "--learning-rate", "0.002", "--seed", "1", "--out", str(model_dir),
    ]) == 0
    assert main([
        "build-critiques", "--model", str(model_dir / "model.ckpt"),
        "--data", str(data_dir), "--seed", "1", "--cap", "8", "--top-e", "2",
        "--out", str(crit_dir),
    ]) == 0
    assert main([
        "train-blender", "--model", str(model_dir / "model.ckpt"),
        "--data", str(data_dir), "--critiques", str(crit_dir),
        "--epochs", "2", "--seed", "1", "--out", str(blend_dir),
    ]) == 0
    return root, data_dir, model_dir, crit_dir, blend_dir


class TestPrepare:
    def test_artifacts_written(self, pipeline):
        _, data_dir, *_ = pipeline
        assert (data_dir / "dataset.bin").exists()
        stats = json.loads((data_dir / "stats.json").read_text())
        assert stats["stats"]["users"] == 16
        assert stats["config"]["threshold"] == 4.5

    def test_bad_ratio_sum_exits_2(self, tmp_path):
        corpus = tmp_path / "c.jsonl"
        write_corpus(corpus, n_users=4)
        code = main([
            "prepare", "--input", str(corpus), "--ratios", "0.9,0.2,0.2",
            "--out", str(tmp_path / "out"),
        ])
        assert code == 2

    def test_missing_input_exits_2(self, tmp_path):
        code = main([
            "prepare", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o"),
        ])
        assert code == 2

    def test_missing_required_flag_exits_1(self):
        assert main(["prepare", "--out", "/tmp/x"]) == 1


class TestTrain:
    def test_artifacts(self, pipeline):
        _, _, model_dir, *_ = pipeline
        assert (model_dir / "model.ckpt").exists()
        log = json.loads((model_dir / "train_log.json").read_text())
        assert len(log["log"]["term_labels"]) == 5  # mmsplus objective
        curve = (model_dir / "loss_curve.csv").read_text().splitlines()
        assert curve[0].startswith("epoch,loss,")
        assert len(curve) == 3  # header + 2 epochs

    def test_resume_continues_step_counter(self, pipeline, tmp_path):
        root, data_dir, model_dir, *_ = pipeline
        from critvae.model import MultimodalVAE

        first = MultimodalVAE.load_checkpoint(model_dir / "model.ckpt")
        resumed_dir = tmp_path / "resumed"
        assert main([
            "train", "--variant", "mmsplus", "--data", str(data_dir),
            "--latent-dim", "4", "--epochs", "1", "--batch-size", "8",
            "--seed", "1", "--resume", str(model_dir / "model.ckpt"),
            "--out", str(resumed_dir),
        ]) == 0
        resumed = MultimodalVAE.load_checkpoint(resumed_dir / "model.ckpt")
        assert resumed.step_offset_ > first.step_offset_ > 0


class TestBuildCritiques:
    def test_artifacts(self, pipeline):
        _, _, _, crit_dir, _ = pipeline
        report = json.loads((crit_dir / "report.json").read_text())
        assert report["n_plus"] > 0 and report["n_minus"] > 0
        plus_lines = (crit_dir / "d_plus.jsonl").read_text().splitlines()
        assert len(plus_lines) == report["n_plus"]
        row = json.loads(plus_lines[0])
        assert set(row) == {"user", "item", "keyphrase", "polarity", "affected", "unaffected"}
        assert row["polarity"] == "+"


class TestEval:
    def test_report_to_file(self, pipeline, tmp_path):
        _, data_dir, model_dir, *_ = pipeline
        out = tmp_path / "report.json"
        assert main([
            "eval", "--model", str(model_dir / "model.ckpt"), "--data", str(data_dir),
            "--split", "val", "--k", "10", "--out", str(out),
        ]) == 0
        report = json.loads(out.read_text())["report"]
        assert set(report["recommendation"]) == {
            "r_precision", "ndcg", "map_at_k", "precision_at_k", "recall_at_k",
        }
        assert report["explanation"] is not None


class TestSimulate:
    def test_result_json(self, pipeline, tmp_path):
        _, data_dir, model_dir, _, blend_dir = pipeline
        out = tmp_path / "sim.json"
        assert main([
            "simulate", "--model", str(model_dir / "model.ckpt"),
            "--blender", str(blend_dir / "blender.ckpt"), "--data", str(data_dir),
            "--polarity", "positive", "--strategy", "pop", "--top-n", "3",
            "--negatives", "5", "--seed", "3", "--out", str(out),
        ]) == 0
        result = json.loads(out.read_text())
        assert result["n_sessions"] > 0
        assert 0.0 <= result["success_rate"] <= 1.0
        assert result["per_top_n"][0]["top_n"] == 3

    def test_uac_reranker_needs_no_blender(self, pipeline, tmp_path):
        _, data_dir, model_dir, *_ = pipeline
        out = tmp_path / "sim_uac.json"
        assert main([
            "simulate", "--model", str(model_dir / "model.ckpt"), "--data", str(data_dir),
            "--reranker", "uac", "--negatives", "5", "--top-n", "3",
            "--out", str(out),
        ]) == 0

    def test_gru_without_blender_exits_2(self, pipeline, tmp_path):
        _, data_dir, model_dir, *_ = pipeline
        assert main([
            "simulate", "--model", str(model_dir / "model.ckpt"), "--data", str(data_dir),
            "--negatives", "5", "--out", str(tmp_path / "x.json"),
        ]) == 2


class TestCompare:
    def test_csv_written(self, pipeline, tmp_path):
        _, data_dir, model_dir, *_ = pipeline
        sims = []
        for seed in (1, 2):
            out = tmp_path / f"sim{seed}.json"
            main([
                "simulate", "--model", str(model_dir / "model.ckpt"), "--data", str(data_dir),
                "--reranker", "identity", "--negatives", "5", "--top-n", "3",
                "--seed", str(seed), "--out", str(out),
            ])
            sims.append(str(out))
        out_csv = tmp_path / "cmp.csv"
        assert main(["compare", *sims, "--out-csv", str(out_csv)]) == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "model,variant,polarity,strategy,top_n,success_rate,ci,avg_length,ci"
        assert len(lines) == 3


class TestConfigFile:
    def test_config_supplies_values_flags_win(self, tmp_path):
        corpus = tmp_path / "c.jsonl"
        write_corpus(corpus, n_users=6, n_items=8)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"threshold": 4.5, "seed": 7, "ratios": "0.5,0.25,0.25"}))
        out = tmp_path / "out"
        assert main([
            "prepare", "--input", str(corpus), "--config", str(cfg),
            "--seed", "9", "--out", str(out),
        ]) == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["config"]["threshold"] == 4.5  # from file
        assert stats["config"]["seed"] == 9  # flag wins

    def test_unknown_config_key_exits_2(self, tmp_path):
        corpus = tmp_path / "c.jsonl"
        write_corpus(corpus, n_users=4)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_flag": 1}))
        assert main([
            "prepare", "--input", str(corpus), "--config", str(cfg),
            "--out", str(tmp_path / "o"),
        ]) == 2


class TestHelp:
    @pytest.mark.parametrize(
        "command",
        ["prepare", "train", "build-critiques", "train-blender", "eval", "simulate", "serve"],
    )
    def test_help_lists_flags_with_defaults(self, command, capsys):
        assert main([command, "--help"]) == 0
        out = capsys.readouterr().out
        assert "Usage" in out
        assert "[default:" in out  # defaults documented in --help


class TestDeterminism:
    def run_pipeline(self, root, corpus):
        """Runs the full pipeline into fixed paths and snapshots the artifacts."""
        import shutil

        for sub in ("data", "model", "crit", "blend"):
            shutil.rmtree(root / sub, ignore_errors=True)
        data_dir = root / "data"
        model_dir = root / "model"
        crit_dir = root / "crit"
        blend_dir = root / "blend"
        sim_out = root / "sim.json"
        for args in (
            ["prepare", "--input", str(corpus), "--threshold", "4.5",
             "--ratios", "0.5,0.25,0.25", "--seed", "5", "--out", str(data_dir)],
            ["train", "--variant", "mms", "--data", str(data_dir), "--latent-dim", "3",
             "--epochs", "2", "--batch-size", "8", "--seed", "5", "--out", str(model_dir)],
            ["build-critiques", "--model", str(model_dir / "model.ckpt"), "--data", str(data_dir),
             "--seed", "5", "--top-e", "2", "--out", str(crit_dir)],
            ["train-blender", "--model", str(model_dir / "model.ckpt"), "--data", str(data_dir),
             "--critiques", str(crit_dir), "--epochs", "2", "--seed", "5", "--out", str(blend_dir)],
            ["simulate", "--model", str(model_dir / "model.ckpt"),
             "--blender", str(blend_dir / "blender.ckpt"), "--data", str(data_dir),
             "--negatives", "3", "--top-n", "3", "--seed", "5", "--label", "m",
             "--out", str(sim_out)],
        ):
            assert main(args) == 0
        return {
            "dataset": (data_dir / "dataset.bin").read_bytes(),
            "model": (model_dir / "model.ckpt").read_bytes(),
            "blender": (blend_dir / "blender.ckpt").read_bytes(),
            "sim": sim_out.read_text(),
            "d_plus": (crit_dir / "d_plus.jsonl").read_text(),
        }

    def test_pipeline_bit_identical_under_seed(self, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        write_corpus(corpus, n_users=10, n_items=10)
        a = self.run_pipeline(tmp_path, corpus)
        b = self.run_pipeline(tmp_path, corpus)
        assert a == b
