import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from ddpdenoise.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from ddpdenoise.data import DatasetManifest, decode_image

SUBCOMMANDS = ["prepare", "corrupt", "train", "evaluate", "bench", "render"]
TINY = ["--base-ch", "4", "--depth", "2", "--epochs", "1", "--batch-per-worker", "4"]


def prepare(tmp, n=16, size=16, *extra):
    path = tmp / "m.json"
    assert main(["prepare", "--synthetic", str(n), "--size", str(size),
                 "--out-manifest", str(path), *extra]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare -> corrupt -> train (unet and unetpp) on 16 phantoms."""
    root = tmp_path_factory.mktemp("cli")
    m = prepare(root)
    assert main(["corrupt", "--manifest", str(m), "--sigma", "0.1"]) == EXIT_OK
    for arch in ("unet", "unetpp"):
        assert main(["train", "--manifest", str(m), "--arch", arch, *TINY,
                     "--out-dir", str(root / arch)]) == EXIT_OK
    return root, m


class TestParser:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help_lists_defaults(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        _, subs = build_parser()
        for action in subs[cmd]._actions:
            for flag in action.option_strings:
                assert flag in out
        if cmd == "corrupt":
            assert "default: 0.1" in out

    @pytest.mark.parametrize("argv", [[], ["nope"], ["train", "--bogus"], ["corrupt", "--sigma", "x"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == EXIT_USAGE
        assert capsys.readouterr().err

    def test_entry_point_exit_code(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "ddpdenoise", "train", "--manifest",
                               str(tmp_path / "none.json"), "--mode", "ddp", "--workers", "0"],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_USAGE
        assert "usage error" in proc.stderr


class TestPrepare:
    def test_synthetic(self, tmp_path):
        m = DatasetManifest.load(prepare(tmp_path, 16, 32))
        assert len(m.records) == 16 and m.noise is None and m.resize_to == 32
        assert sum(len(v) for v in m.split.values()) == 16

    def test_all_train(self, tmp_path):
        m = DatasetManifest.load(prepare(tmp_path, 5, 16, "--splits", "1,0,0"))
        assert len(m.split["train"]) == 5

    def test_rerun_identical_bytes(self, tmp_path):
        a = prepare(tmp_path / "a").read_bytes()
        b = prepare(tmp_path / "b").read_bytes()
        assert a == b

    def test_input_dir(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, (40, 40), dtype=np.uint8)).save(src / f"x{i}.png")
        (src / "junk.png").write_bytes(b"not an image")
        (src / "notes.txt").write_text("ignored")
        out = tmp_path / "out" / "m.json"
        assert main(["prepare", "--input-dir", str(src), "--size", "16", "--out-manifest", str(out)]) == 0
        m = DatasetManifest.load(out)
        assert sorted(r["id"] for r in m.records) == ["x0", "x1", "x2"]
        assert decode_image(out.parent / m.records[0]["clean"]).pixels.shape == (16, 16)

    def test_no_decodable(self, tmp_path):
        (tmp_path / "src").mkdir()
        assert main(["prepare", "--input-dir", str(tmp_path / "src"), "--out-manifest",
                     str(tmp_path / "m.json")]) == EXIT_USAGE

    @pytest.mark.parametrize("splits", ["0.5,0.5", "a,b,c", "0.9,0.9,0.9"])
    def test_bad_splits(self, tmp_path, splits):
        assert main(["prepare", "--synthetic", "4", "--splits", splits,
                     "--out-manifest", str(tmp_path / "m.json")]) == EXIT_USAGE


class TestCorrupt:
    def test_sigma_recorded_and_deterministic(self, tmp_path):
        m = prepare(tmp_path)
        assert main(["corrupt", "--manifest", str(m), "--sigma", "0.2", "--seed", "4"]) == 0
        first = DatasetManifest.load(m)
        assert first.noise.sigma == 0.2
        blobs = [(tmp_path / r["noisy"]).read_bytes() for r in first.records]
        assert main(["corrupt", "--manifest", str(m), "--sigma", "0.2", "--seed", "4"]) == 0
        assert blobs == [(tmp_path / r["noisy"]).read_bytes() for r in DatasetManifest.load(m).records]

    def test_sigma_zero_is_offset(self, tmp_path):
        m = prepare(tmp_path)
        assert main(["corrupt", "--manifest", str(m), "--sigma", "0"]) == 0
        rec = DatasetManifest.load(m).records[0]
        clean = decode_image(tmp_path / rec["clean"]).pixels
        noisy = decode_image(tmp_path / rec["noisy"]).pixels
        assert np.max(np.abs(noisy - np.clip(clean + 0.1, 0, 1))) <= 1 / 255 + 1e-6

    def test_negative_sigma(self, tmp_path):
        assert main(["corrupt", "--manifest", str(prepare(tmp_path)), "--sigma", "-0.1"]) == EXIT_USAGE

    def test_missing_manifest_file(self, tmp_path):
        assert main(["corrupt", "--manifest", str(tmp_path / "absent.json")]) != EXIT_OK


class TestConfigFile:
    def test_overlay_and_flag_precedence(self, pipeline, tmp_path, capsys):
        _, m = pipeline
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"base-ch": 4, "depth": 2, "epochs": 2, "batch_per_worker": 4}))
        assert main(["train", "--manifest", str(m), "--config", str(cfg), "--epochs", "1",
                     "--out-dir", str(tmp_path / "run")]) == 0
        assert capsys.readouterr().out.count("epoch ") == 1

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochz": 3}))
        assert main(["train", "--config", str(cfg)]) == EXIT_USAGE

    def test_not_an_object(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1, 2]")
        assert main(["prepare", "--config", str(cfg)]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, pipeline):
        root, _ = pipeline
        assert (root / "unet" / "best.ckpt").exists()
        assert (root / "unet" / "train_log.jsonl").exists()

    @pytest.mark.parametrize("flags", [["--mode", "ddp", "--workers", "0"],
                                       ["--mode", "single", "--workers", "2"],
                                       ["--epochs", "0"]])
    def test_bad_combination(self, pipeline, tmp_path, flags):
        _, m = pipeline
        assert main(["train", "--manifest", str(m), *flags, "--out-dir", str(tmp_path)]) == EXIT_USAGE
        assert not any(tmp_path.iterdir())

    def test_requires_noise(self, tmp_path):
        m = prepare(tmp_path)
        assert main(["train", "--manifest", str(m), *TINY, "--out-dir", str(tmp_path / "r")]) == EXIT_USAGE


class TestEvaluate:
    def test_reports(self, pipeline, tmp_path, capsys):
        root, m = pipeline
        out = tmp_path / "rep"
        assert main(["evaluate", "--manifest", str(m), "--ckpt", str(root / "unet" / "best.ckpt"),
                     "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "noisy input" in text and "SSIM variant: windowed" in text
        rows = list(csv.DictReader(open(out.with_suffix(".csv"))))
        assert len(rows) == 1 and rows[0]["model"] == "unet"
        body = json.loads(out.with_suffix(".json").read_text())
        n_test = len(DatasetManifest.load(m).split["test"])
        assert len(body[0]["ssim"]["per_image"]) == n_test

    def test_arch_mismatch(self, pipeline, tmp_path):
        root, m = pipeline
        assert main(["evaluate", "--manifest", str(m), "--ckpt", str(root / "unet" / "best.ckpt"),
                     "--arch", "unetpp", "--out", str(tmp_path / "r")]) == EXIT_DATA

    def test_missing_ckpt(self, pipeline, tmp_path):
        _, m = pipeline
        assert main(["evaluate", "--manifest", str(m), "--ckpt", str(tmp_path / "x.ckpt"),
                     "--out", str(tmp_path / "r")]) == EXIT_DATA


class TestRender:
    @pytest.mark.parametrize("n", [1, 3])
    def test_grid(self, pipeline, tmp_path, n):
        root, m = pipeline
        ids = [r["id"] for r in DatasetManifest.load(m).records][:n]
        out = tmp_path / "g.png"
        ckpts = f"{root / 'unet' / 'best.ckpt'},{root / 'unetpp' / 'best.ckpt'}"
        assert main(["render", "--manifest", str(m), "--ckpts", ckpts, "--ids", ",".join(ids),
                     "--out", str(out)]) == 0
        assert decode_image(out).pixels.shape == (n * 16 + (n - 1) * 2, 4 * 16 + 3 * 2)

    def test_unknown_id(self, pipeline, tmp_path):
        root, m = pipeline
        ckpts = f"{root / 'unet' / 'best.ckpt'},{root / 'unetpp' / 'best.ckpt'}"
        assert main(["render", "--manifest", str(m), "--ckpts", ckpts, "--ids", "ghost",
                     "--out", str(tmp_path / "g.png")]) == EXIT_USAGE


class TestBench:
    def _configs(self, tmp_path, body):
        path = tmp_path / "configs.json"
        path.write_text(json.dumps(body))
        return path

    def test_two_configs(self, pipeline, tmp_path, capsys):
        _, m = pipeline
        base = dict(arch="unet", base_ch=4, depth=2, epochs=1, batch_per_worker=4)
        cfgs = self._configs(tmp_path, [dict(name="one worker", baseline=True, **base),
                                        dict(name="ddp x2", mode="ddp", workers=2, backend="thread", **base)])
        assert main(["bench", "--manifest", str(m), "--configs", str(cfgs), "--out", str(tmp_path / "b")]) == 0
        text = (tmp_path / "b" / "timing.txt").read_text()
        assert "TS (%)" in text and "0.00%" in text
        rows = list(csv.DictReader(open(tmp_path / "b" / "timing.csv")))
        assert [r["mode"] for r in rows] == ["single", "ddp"]

    def test_baseline_only(self, pipeline, tmp_path):
        _, m = pipeline
        cfgs = self._configs(tmp_path, [dict(name="b", baseline=True, base_ch=4, depth=2, epochs=1)])
        assert main(["bench", "--manifest", str(m), "--configs", str(cfgs), "--out", str(tmp_path / "b")]) == 0
        assert "0.00%" in (tmp_path / "b" / "timing.txt").read_text()

    @pytest.mark.parametrize("body", [[dict(name="a")], [dict(name="a", baseline=True), dict(name="a")],
                                      [dict(name="a", baseline=True, warp=9)]])
    def test_rejected(self, pipeline, tmp_path, body):
        _, m = pipeline
        cfgs = self._configs(tmp_path, body)
        assert main(["bench", "--manifest", str(m), "--configs", str(cfgs), "--out", str(tmp_path)]) == EXIT_USAGE
