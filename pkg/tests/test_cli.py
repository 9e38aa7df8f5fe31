import json

import pytest

from llhanet.cli import EXIT_DEGENERATE, EXIT_INVALID, EXIT_OK, main
from llhanet.network import PRESETS, load_checkpoint
from llhanet.scenes import read_dataset


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.llha"
    assert main(["gen-data", "--out", str(path), "--scenes", "4", "--seed", "3",
                 "--correspondences", "48", "--outlier-ratio", "0.5"]) == EXIT_OK
    return path


class TestGenData:
    def test_flags_reach_the_file(self, data):
        ds = read_dataset(data)
        assert len(ds) == 4 and ds[0].corr.coords.shape == (48, 4)
        assert ds.header["seed"] == 3 and ds.header["config"]["outlier_ratio"] == 0.5

    def test_env_seed_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LLHA_SEED", "17")
        main(["gen-data", "--out", str(tmp_path / "a.llha"), "--scenes", "1", "--seed", "3"])
        assert read_dataset(tmp_path / "a.llha").header["seed"] == 17

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"scene": {"n_correspondences": 20, "outlier_ratio": 0.2}}))
        main(["gen-data", "--out", str(tmp_path / "a.llha"), "--scenes", "1", "--config", str(cfg),
              "--outlier-ratio", "0.4"])
        hdr = read_dataset(tmp_path / "a.llha").header["config"]
        assert hdr["n_correspondences"] == 20 and hdr["outlier_ratio"] == 0.4

    def test_invalid_values_exit_2(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "a.llha"), "--scenes", "1",
                     "--outlier-ratio", "1.5"]) == EXIT_INVALID
        assert "outlier_ratio" in capsys.readouterr().err

    def test_unknown_config_section(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"scenes": {}}))
        assert main(["gen-data", "--out", str(tmp_path / "a.llha"), "--scenes", "1",
                     "--config", str(cfg)]) == EXIT_INVALID

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LLHA_SEED", "abc")
        assert main(["gen-data", "--out", str(tmp_path / "a.llha"), "--scenes", "1"]) == EXIT_INVALID

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data"])
        assert exc.value.code == 2


class TestPipeline:
    def test_train_eval_baseline_report(self, data, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(run), "--preset", "tiny",
                     "--iters", "2", "--batch-size", "2", "--eval-every", "2"]) == EXIT_OK
        assert load_checkpoint(run / "final.ckpt", expected=PRESETS["tiny"]).config == PRESETS["tiny"]
        trace = [json.loads(l) for l in (run / "trace.jsonl").read_text().splitlines()]
        assert trace[-1]["iter"] == 2

        report = tmp_path / "rep.json"
        assert main(["eval", "--data", str(data), "--checkpoint", str(run / "final.ckpt"),
                     "--ransac-iters", "20", "--out", str(report)]) == EXIT_OK
        rep = json.loads(report.read_text())
        assert rep["schema_version"] == 1 and set(rep["map_at"]) == {"no_ransac", "ransac"}

        base = tmp_path / "base.json"
        assert main(["baseline", "--data", str(data), "--iterations", "50", "--out", str(base)]) == EXIT_OK
        b = json.loads(base.read_text())
        assert b["scenes"] == 4 and 0 <= b["f_score"] <= 100 and set(b["map_at"]) == {"5", "10", "20"}

        plots = tmp_path / "plots"
        assert main(["report", "--eval", str(report), "--out", str(plots)]) == EXIT_OK
        assert (plots / "prf.png").stat().st_size > 0 and (plots / "map_table.png").exists()

        assert main(["inspect", "--checkpoint", str(run / "final.ckpt")]) == EXIT_OK

    def test_eval_refuses_other_preset(self, data, tmp_path, capsys):
        run = tmp_path / "run"
        main(["train", "--data", str(data), "--out", str(run), "--preset", "tiny", "--iters", "1",
              "--batch-size", "2"])
        assert main(["eval", "--data", str(data), "--checkpoint", str(run / "final.ckpt"),
                     "--preset", "desk", "--no-ransac"]) == EXIT_INVALID
        assert "CheckpointError" in capsys.readouterr().err

    def test_strict_degenerate_exit_3(self, data):
        # one RANSAC iteration on half-outlier scenes leaves some fits below the support minimum
        code = main(["baseline", "--data", str(data), "--iterations", "1", "--threshold", "1e-12", "--strict"])
        assert code == EXIT_DEGENERATE

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["baseline", "--data", str(tmp_path / "nope.llha")]) == EXIT_INVALID

    def test_ablate_and_plot(self, data, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--train-data", str(data), "--test-data", str(data), "--axes", "pool",
                     "--preset", "tiny", "--iters", "1", "--batch-size", "2", "--out", str(out)]) == EXIT_OK
        rows = json.loads((out / "ablation.json").read_text())
        assert [r["config"] for r in rows] == ["gap", "gmp"]
        assert main(["report", "--ablation", str(out / "ablation.json"), "--out", str(out)]) == EXIT_OK
        assert (out / "ablation_f.png").exists()

    def test_report_needs_input(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == EXIT_INVALID
