import json
import subprocess
import sys

import numpy as np
import pytest

from sconv.cli import main, parse_config_file
from sconv.errors import ConfigError


def run_cli(*argv):
    return main(list(argv))


class TestConfigParsing:
    def test_key_value_types(self, tmp_path):
        p = tmp_path / "cfg"
        p.write_text("base_lr = 0.01\nepochs = 3\nclass_reweight = true\n"
                     "source_kind = depth\nwidths = [4, 4, 8, 8]\n"
                     "# comment line\n\nscale_range = [0.9, 1.1]\n")
        cfg = parse_config_file(p)
        assert cfg == {"base_lr": 0.01, "epochs": 3, "class_reweight": True,
                       "source_kind": "depth", "widths": [4, 4, 8, 8],
                       "scale_range": [0.9, 1.1]}

    def test_malformed_line_raises(self, tmp_path):
        p = tmp_path / "cfg"
        p.write_text("this is not a pair\n")
        with pytest.raises(ConfigError):
            parse_config_file(p)


class TestSynthCommand:
    def test_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert run_cli("synth", "--out", str(out), "--scenes", "2",
                       "--val-scenes", "1", "--size", "16", "--seed", "3") == 0
        info = json.loads(capsys.readouterr().out)
        assert info["splits"] == {"train": 2, "val": 1}
        assert (out / "intrinsics.txt").exists()
        assert (out / "train" / "manifest.txt").exists()

    def test_refuses_nonempty_dir(self, tmp_path, capsys):
        out = tmp_path / "data"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        code = run_cli("synth", "--out", str(out), "--scenes", "1",
                       "--val-scenes", "1", "--size", "16")
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["category"] == "data"

    def test_force_overwrites(self, tmp_path, capsys):
        out = tmp_path / "data"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert run_cli("synth", "--out", str(out), "--scenes", "1",
                       "--val-scenes", "1", "--size", "16", "--force") == 0


class TestErrorReporting:
    def test_machine_readable_category_on_stderr(self, tmp_path, capsys):
        code = run_cli("train", "--data", str(tmp_path / "nowhere"),
                       "--out", str(tmp_path / "run"))
        assert code != 0
        err = json.loads(capsys.readouterr().err)
        assert err["category"] == "data"
        assert "message" in err


class TestGradcheckCommand:
    def test_table_output_and_exit_code(self, capsys):
        assert run_cli("gradcheck", "--ops", "relu,sigmoid",
                       "--trials", "2") == 0
        out = capsys.readouterr().out
        assert "relu.input" in out and "sigmoid.input" in out
        assert "PASS" in out and "all passed" in out


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One tiny end-to-end train via the CLI shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--out", str(data), "--scenes", "4",
                 "--val-scenes", "2", "--size", "16", "--seed", "1"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--epochs", "1", "--precision", "f32", "--seed", "0",
                 "--set", "crop=[16,16]", "--set", "batch_size=2",
                 "--set", "widths=[4,4,8,8]", "--set", "f_hidden=4"]) == 0
    return {"data": data, "run": run}


class TestTrainEvalCommands:
    def test_outputs_exist(self, cli_run):
        run = cli_run["run"]
        assert (run / "train_log.jsonl").exists()
        assert (run / "metrics.json").exists()
        assert (run / "checkpoint_best" / "manifest.json").exists()
        assert (run / "checkpoint_last" / "manifest.json").exists()
        assert (run / "checkpoint_init" / "manifest.json").exists()

    def test_log_is_valid_jsonl(self, cli_run):
        lines = (cli_run["run"] / "train_log.jsonl").read_text().splitlines()
        records = [json.loads(l) for l in lines]
        assert any("iter" in r for r in records)
        assert any("miou" in r for r in records)

    def test_eval_writes_metrics(self, cli_run, tmp_path, capsys):
        code = main(["eval", "--checkpoint",
                     str(cli_run["run"] / "checkpoint_best"),
                     "--data", str(cli_run["data"]), "--split", "val",
                     "--out", str(tmp_path)])
        assert code == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert set(metrics) == {"acc", "macc", "miou", "per_class"}
        assert 0.0 <= metrics["miou"] <= 1.0

    def test_eval_deterministic(self, cli_run, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(cli_run["run"] / "checkpoint_best"),
                "--data", str(cli_run["data"]), "--split", "val"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "metrics.json").read_text()
        b = (tmp_path / "b" / "metrics.json").read_text()
        assert a == b

    def test_rfvis_writes_one_png_per_sconv(self, cli_run, tmp_path, capsys):
        code = main(["rfvis", "--checkpoint",
                     str(cli_run["run"] / "checkpoint_best"),
                     "--data", str(cli_run["data"]), "--split", "val",
                     "--index", "0", "--out", str(tmp_path)])
        assert code == 0
        pngs = sorted(p.name for p in tmp_path.glob("rf_*.png"))
        assert len(pngs) == 12
        assert pngs[0] == "rf_stage1_block0_conv0.png"
        from PIL import Image
        img = np.asarray(Image.open(tmp_path / pngs[0]))
        assert img.dtype == np.uint8


class TestBenchCommand:
    def test_report_schema(self, tmp_path, capsys):
        code = main(["bench", "--size", "16", "--runs", "3", "--warmup", "1",
                     "--out", str(tmp_path),
                     "--set", "widths=[4,4,8,8]", "--set", "f_hidden=4"])
        assert code == 0
        report = json.loads((tmp_path / "bench_report.json").read_text())
        assert set(report["models"]) == {"baseline", "sgnet"}
        for m in report["models"].values():
            assert m["latency_mean_s"] > 0
            assert m["runs"] == 3
            assert {"backbone", "sconv_extra", "decoder",
                    "total", "overhead_pct"} <= set(m["params"])
        assert report["models"]["baseline"]["params"]["sconv_extra"] == 0
        assert "protocol" in report


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "sconv.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
