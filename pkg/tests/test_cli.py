import json
import subprocess
import sys

import numpy as np
import pytest

from surfelsplat._main import main
from surfelsplat.cli import build_parser

TRAIN_ARGS = ["train", "--toy", "textured_quad", "--iters", "12", "--cap", "8",
              "--views", "2", "--res", "16"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(TRAIN_ARGS + ["--out", str(out)])
    assert rc == 0
    return out


class TestParser:
    def test_help_lists_defaults(self, capsys):
        for cmd in ("train", "render", "eval", "decompose", "bench",
                    "export-ply", "gen-scene"):
            with pytest.raises(SystemExit) as e:
                build_parser().parse_args([cmd, "--help"])
            assert e.value.code == 0
            out = capsys.readouterr().out
            assert "default" in out

    def test_unknown_command_rejected(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["frobnicate"])

    def test_threads_env_is_set_before_numpy(self):
        code = ("import sys; sys.argv=['surfelsplat','gen-scene','--toy',"
                "'cube','--out','/tmp/_t','--views','1','--test-views','1',"
                "'--res','8','--threads','1'];"
                "from surfelsplat._main import main; main();"
                "import os; print(os.environ['OPENBLAS_NUM_THREADS'])")
        res = subprocess.run([sys.executable, "-c", code],
                             capture_output=True, text=True)
        assert res.returncode == 0
        assert res.stdout.strip().endswith("1")

    def test_bad_threads_value(self, capsys):
        assert main(["gen-scene", "--out", "/tmp/x", "--threads", "zero"]) == 2
        assert main(["gen-scene", "--out", "/tmp/x", "--threads", "0"]) == 2


class TestTrainCommand:
    def test_writes_outputs(self, trained):
        assert (trained / "checkpoint.ckpt").exists()
        assert (trained / "log.jsonl").exists()
        assert (trained / "eval_train.json").exists()
        lines = (trained / "log.jsonl").read_text().strip().splitlines()
        rec = json.loads(lines[-1])
        assert rec["iter"] == 11

    def test_zero_iters(self, tmp_path):
        rc = main(["train", "--toy", "cube", "--iters", "0", "--cap", "4",
                   "--views", "1", "--res", "8", "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "checkpoint.ckpt").exists()
        assert (tmp_path / "log.jsonl").read_text() == ""

    def test_conflicting_kernel_flags(self, tmp_path, capsys):
        with pytest.raises(SystemExit, match="config error"):
            main(TRAIN_ARGS + ["--out", str(tmp_path / "x"),
                               "--kernel", "beta", "--disable-beta"])
        assert not (tmp_path / "x").exists()

    def test_config_overlay_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"no_such_option": 1}))
        rc = main(TRAIN_ARGS + ["--out", str(tmp_path / "x"),
                                "--config", str(cfg)])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_config_overlay_applies(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"beta_init": 3.5}))
        rc = main(["train", "--toy", "cube", "--iters", "0", "--cap", "4",
                   "--views", "1", "--res", "8", "--out", str(tmp_path / "r"),
                   "--config", str(cfg)])
        assert rc == 0
        from surfelsplat.dataio import load_checkpoint
        ck = load_checkpoint(tmp_path / "r" / "checkpoint.ckpt")
        assert ck.config["beta_init"] == 3.5


class TestRenderCommand:
    def test_turntable_files(self, trained, tmp_path):
        rc = main(["render", str(trained / "checkpoint.ckpt"),
                   "--out", str(tmp_path), "--turntable", "3", "--res", "16"])
        assert rc == 0
        names = sorted(p.name for p in tmp_path.glob("*.png"))
        assert names == ["full_0000.png", "full_0001.png", "full_0002.png"]

    def test_render_deterministic_bytes(self, trained, tmp_path):
        for sub in ("a", "b"):
            rc = main(["render", str(trained / "checkpoint.ckpt"),
                       "--out", str(tmp_path / sub), "--turntable", "1",
                       "--res", "16"])
            assert rc == 0
        b1 = (tmp_path / "a" / "full_0000.png").read_bytes()
        b2 = (tmp_path / "b" / "full_0000.png").read_bytes()
        assert b1 == b2

    def test_decompose_mode_files(self, trained, tmp_path):
        rc = main(["decompose", str(trained / "checkpoint.ckpt"),
                   "--out", str(tmp_path), "--turntable", "1", "--res", "16",
                   "--mode", "surfel_only"])
        assert rc == 0
        assert (tmp_path / "surfel_only_0000.png").exists()

    def test_bad_checkpoint_errors(self, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        rc = main(["render", str(tmp_path / "x.ckpt"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1


class TestEvalCommand:
    def test_table_and_json(self, trained, tmp_path, capsys):
        out = tmp_path / "r.json"
        rc = main(["eval", str(trained / "checkpoint.ckpt"), "--toy",
                   "textured_quad", "--views", "2", "--res", "16",
                   "--split", "test", "--json-out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        rep = json.loads(out.read_text())
        assert f"{rep['mean_psnr']:8.3f}".strip() in printed


class TestOtherCommands:
    def test_bench_json(self, trained, tmp_path, capsys):
        out = tmp_path / "b.json"
        rc = main(["bench", str(trained / "checkpoint.ckpt"), "--res", "16",
                   "--repeats", "2", "--json-out", str(out)])
        assert rc == 0
        rep = json.loads(out.read_text())
        (entry,) = rep.values()
        assert entry["median_ms"] > 0

    def test_export_ply_roundtrip(self, trained, tmp_path):
        out = tmp_path / "s.ply"
        rc = main(["export-ply", str(trained / "checkpoint.ckpt"), str(out)])
        assert rc == 0
        from surfelsplat.dataio import import_ply, load_checkpoint
        cloud = import_ply(out)
        ck = load_checkpoint(trained / "checkpoint.ckpt")
        assert cloud.count == ck.cloud.count
        assert np.allclose(cloud.mu, ck.cloud.mu, atol=1e-5)

    def test_gen_scene_loadable(self, tmp_path):
        rc = main(["gen-scene", "--toy", "two_planes", "--out",
                   str(tmp_path / "d"), "--views", "2", "--test-views", "1",
                   "--res", "8"])
        assert rc == 0
        from surfelsplat.dataio import load_nerf_synthetic
        ds = load_nerf_synthetic(tmp_path / "d", split="train")
        assert len(ds) == 2
