import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cubeattn import io
from cubeattn.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main

GOLDEN = Path(__file__).parent / "golden"
SMALL_MODEL = {"grid": [2, 4, 4], "cube": [1, 2, 2], "proxy_grid": [1, 2, 2], "head_dim": 8}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestLatentFormat:
    def test_round_trip(self, tmp_path):
        v = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
        io.write_latent(tmp_path / "a.avt", v)
        back = io.read_latent(tmp_path / "a.avt")
        assert back.dtype == np.float32 and np.array_equal(back, v)

    def test_header_layout(self, tmp_path):
        io.write_latent(tmp_path / "a.avt", np.zeros((1, 2, 3, 4)))
        raw = (tmp_path / "a.avt").read_bytes()
        assert raw[:4] == b"AVT1"
        assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 1, 2, 3, 4]
        assert len(raw) == 24 + 4 * 24

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:-4],
        lambda b: b + b"\0\0\0\0",
        lambda b: b[:4] + b"\x02" + b[5:],
        lambda b: b[:10],
    ])
    def test_corrupt(self, tmp_path, mutate):
        io.write_latent(tmp_path / "a.avt", np.ones((1, 2, 2, 2)))
        (tmp_path / "b.avt").write_bytes(mutate((tmp_path / "a.avt").read_bytes()))
        with pytest.raises(io.FormatError):
            io.read_latent(tmp_path / "b.avt")

    def test_rejects_wrong_rank(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_latent(tmp_path / "a.avt", np.ones((2, 2, 2)))


class TestWeightsFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        w = {"b": rng.standard_normal((2, 3)), "a": rng.standard_normal(4), "s": np.array(2.5)}
        io.write_weights(tmp_path / "w.avw", w, {"x": 1})
        back, cfg = io.read_weights(tmp_path / "w.avw")
        assert cfg == {"x": 1} and set(back) == set(w)
        assert all(np.array_equal(back[k], w[k]) and back[k].shape == w[k].shape for k in w)

    def test_insertion_order_irrelevant(self, tmp_path):
        a, b = np.ones(2), np.zeros(3)
        io.write_weights(tmp_path / "1", {"a": a, "b": b})
        io.write_weights(tmp_path / "2", {"b": b, "a": a})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    @pytest.mark.parametrize("cut", [3, 12, -1])
    def test_truncated(self, tmp_path, cut):
        io.write_weights(tmp_path / "w", {"a": np.ones((2, 2))})
        (tmp_path / "t").write_bytes((tmp_path / "w").read_bytes()[:cut])
        with pytest.raises(io.FormatError):
            io.read_weights(tmp_path / "t")

    def test_loss_csv(self, tmp_path):
        losses = [1.0, 0.123456789012345, 1e-9]
        io.write_loss_csv(tmp_path / "l.csv", losses)
        assert io.read_loss_csv(tmp_path / "l.csv") == losses
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "step,loss"


class TestPartitionCommand:
    def test_golden_dump(self, capsys):
        code, out, _ = run(capsys, "partition", "--grid", "2,2,4", "--cube", "1,2,2")
        assert code == EXIT_OK
        assert json.loads(out) == json.loads((GOLDEN / "partition_2x2x4_1x2x2.json").read_text())

    def test_perm_example(self, capsys):
        _, out, _ = run(capsys, "partition", "--grid", "2,2,4", "--cube", "1,2,2")
        assert json.loads(out)["perm"][:8] == [0, 1, 4, 5, 2, 3, 6, 7]

    @pytest.mark.parametrize("argv", [
        ["partition", "--grid", "2,2,4"],
        ["partition", "--grid", "2,2", "--cube", "1,1,1"],
        ["partition", "--grid", "1,2,2", "--cube", "2,1,1"],
        ["partition", "--grid", "0,2,2", "--cube", "1,1,1"],
        ["partition", "--bogus"],
        ["nonsense"],
        [],
    ])
    def test_usage_errors(self, capsys, argv):
        assert run(capsys, *argv)[0] == EXIT_USAGE

    def test_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid": [2, 2, 4], "cube": [2, 2, 2]}))
        _, out, _ = run(capsys, "partition", "--config", cfg)
        assert json.loads(out)["cube"] == [2, 2, 2]
        _, out, _ = run(capsys, "partition", "--config", cfg, "--cube", "1,2,2")
        assert json.loads(out)["cube"] == [1, 2, 2]

    def test_config_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid": [2, 2, 4], "cube": [1, 2, 2], "colour": 1}))
        assert run(capsys, "partition", "--config", cfg)[0] == EXIT_USAGE


class TestMaskCommand:
    def test_example_density(self, capsys, tmp_path):
        code, out, _ = run(capsys, "mask", "--grid", "1,3,3", "--cube", "1,1,1", "--out", tmp_path)
        assert code == EXIT_OK
        s = json.loads(out)
        # centre cell sees 9 of 9, corners 4, edges 6: (9 + 4*4 + 4*6) / 81
        assert s["allowed_entries"] == 49 and s["density"] == pytest.approx(49 / 81)
        assert json.loads((tmp_path / "mask.json").read_text()) == s

    def test_radius_covers_all(self, capsys, tmp_path):
        _, out, _ = run(capsys, "mask", "--grid", "2,4,4", "--cube", "1,2,2", "--radius", "5", "--n-global", "3",
                        "--out", tmp_path)
        s = json.loads(out)
        # globals still never read detail keys
        assert s["global_to_detail_forbidden"]
        assert s["allowed_entries"] == 35 * 35 - 3 * 32

    def test_pbm(self, capsys, tmp_path):
        run(capsys, "mask", "--grid", "1,2,4", "--cube", "1,2,2", "--radius", "0", "--n-global", "1", "--out", tmp_path)
        lines = (tmp_path / "mask.pbm").read_text().splitlines()
        assert lines[:2] == ["P1", "9 9"]
        rows = [list(map(int, ln.split())) for ln in lines[2:]]
        assert rows[0] == [1, 1, 1, 1, 0, 0, 0, 0, 1]
        assert rows[8] == [0] * 8 + [1]

    def test_policy_none(self, capsys, tmp_path):
        run(capsys, "mask", "--grid", "1,2,4", "--cube", "1,2,2", "--radius", "0", "--n-global", "1",
            "--policy", "none", "--out", tmp_path)
        rows = (tmp_path / "mask.pbm").read_text().splitlines()[2:]
        assert rows[0].split() == ["1"] * 4 + ["0"] * 5

    def test_refuses_large(self, capsys, tmp_path):
        assert run(capsys, "mask", "--grid", "16,64,64", "--cube", "4,8,8", "--out", tmp_path)[0] == EXIT_USAGE


class TestFlopsCommand:
    def test_single_row(self, capsys, caplog):
        caplog.set_level("INFO", "cubeattn")
        code, out, _ = run(capsys, "flops", "--grid", "1,4,4", "--cube", "1,4,4", "--head-dim", "2", "--name", "a")
        assert code == EXIT_OK
        assert out.splitlines()[1] == "a,16,0,2048,2048,1"
        assert "convention" in caplog.text

    def test_presets(self, capsys, caplog):
        caplog.set_level("INFO", "cubeattn")
        code, out, _ = run(capsys, "flops")
        lines = out.strip().splitlines()
        assert code == EXIT_OK and len(lines) == 6 and lines[-1].startswith("8K-81f,")
        assert "gap 1028.6" in caplog.text

    def test_rt_sweep(self, capsys):
        code, out, _ = run(capsys, "flops", "--rt-sweep", "4")
        assert code == EXIT_OK
        assert out.strip().splitlines()[-1].split(",")[-1] == "16"

    def test_empty_presets(self, capsys, tmp_path):
        f = tmp_path / "p.json"
        f.write_text("[]")
        assert run(capsys, "flops", "--presets", f)[0] == EXIT_USAGE

    def test_missing_presets_file(self, capsys, tmp_path):
        assert run(capsys, "flops", "--presets", tmp_path / "nope.json")[0] == EXIT_USAGE


class TestRopeCheck:
    def test_zero_error(self, capsys):
        code, out, _ = run(capsys, "rope-check")
        r = json.loads(out)
        assert code == EXIT_OK and r["max_alignment_error"] == 0.0 and r["scales"] == [4, 4, 4]

    def test_bad_head_dim(self, capsys):
        assert run(capsys, "rope-check", "--head-dim", "7")[0] == EXIT_USAGE


@pytest.fixture
def small_config(tmp_path):
    f = tmp_path / "train.json"
    f.write_text(json.dumps({"model": SMALL_MODEL, "dataset_size": 4, "eval_size": 2}))
    return f


class TestTrainSample:
    def test_zero_steps_keeps_init(self, capsys, tmp_path, small_config):
        out = tmp_path / "run"
        code, stdout, _ = run(capsys, "train", "--config", small_config, "--steps", "0", "--out", out)
        assert code == EXIT_OK
        assert (out / "init.avw").read_bytes() == (out / "weights.avw").read_bytes()
        assert io.read_loss_csv(out / "loss.csv") == []
        s = json.loads(stdout)
        assert s["initial_eval"] == s["final_eval"]

    @pytest.mark.parametrize("stage", ["1", "2"])
    def test_deterministic(self, capsys, tmp_path, small_config, stage):
        for name in ("a", "b"):
            assert run(capsys, "train", "--config", small_config, "--stage", stage, "--steps", "3",
                       "--out", tmp_path / name)[0] == EXIT_OK
        for f in ("weights.avw", "loss.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert len(io.read_loss_csv(tmp_path / "a" / "loss.csv")) == 3

    def test_freeze_ffn_flag(self, capsys, tmp_path, small_config):
        run(capsys, "train", "--config", small_config, "--steps", "2", "--freeze-ffn", "--out", tmp_path)
        w0, _ = io.read_weights(tmp_path / "init.avw")
        w1, cfg = io.read_weights(tmp_path / "weights.avw")
        assert cfg["freeze_ffn"] is True
        assert np.array_equal(w0["l0.ffn_w1"], w1["l0.ffn_w1"])
        assert not np.array_equal(w0["l0.wq"], w1["l0.wq"])

    def test_requires_out(self, capsys, small_config):
        assert run(capsys, "train", "--config", small_config)[0] == EXIT_USAGE

    def test_sample(self, capsys, tmp_path, small_config):
        run(capsys, "train", "--config", small_config, "--steps", "2", "--out", tmp_path)
        proxy = np.random.default_rng(0).standard_normal((1, 2, 2, 4))
        io.write_latent(tmp_path / "proxy.avt", proxy)
        w = tmp_path / "weights.avw"
        common = ["sample", "--weights", w, "--steps", "3", "--proxy", tmp_path / "proxy.avt", "--seed", "7"]
        assert run(capsys, *common, "--out", tmp_path / "one.avt", "--cfg-scale", "1")[0] == EXIT_OK
        assert run(capsys, *common, "--out", tmp_path / "off.avt", "--no-cfg")[0] == EXIT_OK
        assert run(capsys, *common, "--out", tmp_path / "two.avt", "--cfg-scale", "2")[0] == EXIT_OK
        one = (tmp_path / "one.avt").read_bytes()
        assert one == (tmp_path / "off.avt").read_bytes()
        assert one != (tmp_path / "two.avt").read_bytes()
        assert io.read_latent(tmp_path / "one.avt").shape == (2, 4, 4, 4)

    def test_sample_errors(self, capsys, tmp_path, small_config):
        run(capsys, "train", "--config", small_config, "--steps", "0", "--out", tmp_path)
        w = tmp_path / "weights.avw"
        io.write_latent(tmp_path / "bad.avt", np.zeros((1, 1, 1, 4)))
        cases = [
            ["--out", tmp_path / "x.avt", "--no-cfg", "--cfg-scale", "2"],
            ["--out", tmp_path / "x.avt", "--steps", "0"],
            ["--out", tmp_path / "x.avt", "--proxy", tmp_path / "bad.avt"],
            ["--out", tmp_path / "x.avt", "--proxy", tmp_path / "missing.avt"],
            [],
        ]
        for extra in cases:
            assert run(capsys, "sample", "--weights", w, *extra)[0] == EXIT_USAGE
        assert run(capsys, "sample", "--weights", small_config, "--out", tmp_path / "x.avt")[0] == EXIT_USAGE


class TestCheckCommand:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "check")
        assert code == EXIT_OK and "FAIL" not in out

    def test_fault_detected(self, capsys):
        code, out, _ = run(capsys, "check", "--inject-fault", "--only", "sparse_vs_dense,mask_asymmetry")
        assert code == EXIT_FAIL and out.count("FAIL") >= 2

    def test_unknown_check(self, capsys):
        assert run(capsys, "check", "--only", "nope")[0] == EXIT_USAGE


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "cubeattn", "rope-check"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["max_alignment_error"] == 0.0
    r = subprocess.run([sys.executable, "-m", "cubeattn", "flops", "--radius", "x"], capture_output=True, text=True)
    assert r.returncode == 2
