"""End-to-end command-line tests; every invocation is an in-process main()."""

import json

import pytest

from layoutflow.checkpoint import load_checkpoint
from layoutflow.cli import main
from layoutflow.config import load_run_config

TINY = {
    "model": {
        "image_size": 16,
        "patch_size": 4,
        "width": 16,
        "depth": 2,
        "heads": 2,
        "mlp_ratio": 2,
        "visual_patch": 4,
        "lora_rank": 2,
    },
    "train": {"batch_size": 4, "log_every": 1, "checkpoint_every": 2},
    "sample": {"steps": 3},
    "data": {"image_size": 16, "min_side": 4, "max_side": 7, "num_images": 4},
}


@pytest.fixture()
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture()
def dataset(tmp_path, cfg_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", cfg_path, "--out", str(out)]) == 0
    return out


@pytest.fixture()
def base_run(tmp_path, cfg_path, dataset):
    out = tmp_path / "base"
    rc = main(
        ["train", "--config", cfg_path, "--phase", "base", "--steps", "4",
         "--data", str(dataset), "--out", str(out)]
    )
    assert rc == 0
    return out


class TestGenData:
    def test_writes_scenes_and_config(self, dataset):
        assert len(list(dataset.glob("images/*.png"))) == 4
        assert len(list(dataset.glob("annotations/*.json"))) == 4
        cfg = load_run_config(dataset / "config.json")
        assert cfg.data.num_images == 4 and cfg.data.image_size == 16

    def test_generation_is_deterministic(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-data", "--config", cfg_path, "--out", str(out)]) == 0
        names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert names
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_changes_content(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", cfg_path, "--out", str(a)]) == 0
        assert main(["gen-data", "--config", cfg_path, "--seed", "9", "--out", str(b)]) == 0
        assert (a / "images" / "00000.png").read_bytes() != (
            b / "images" / "00000.png"
        ).read_bytes()

    def test_dense_preset(self, tmp_path):
        out = tmp_path / "dense"
        rc = main(["gen-data", "--dense", "--num-images", "2", "--out", str(out)])
        assert rc == 0
        cfg = load_run_config(out / "config.json")
        assert cfg.data.min_gap == 0 and cfg.data.n_min > 4


class TestTrain:
    def test_base_phase_outputs(self, base_run):
        tensors, meta = load_checkpoint(base_run / "model.ckpt")
        assert meta["step"] == 4 and meta["phase"] == "base"
        assert not any(name.startswith("assemble.") for name in tensors)
        rows = (base_run / "loss_log.csv").read_text().strip().splitlines()
        assert len(rows) == 4 and rows[0].startswith("0,")
        assert (base_run / "checkpoints" / "step_0000002.ckpt").is_file()
        saved = load_run_config(base_run / "config.json")
        assert saved.model.image_size == 16 and saved.train.batch_size == 4

    def test_layout_phase_requires_base(self, tmp_path, cfg_path, dataset):
        rc = main(
            ["train", "--config", cfg_path, "--phase", "layout", "--steps", "2",
             "--data", str(dataset), "--out", str(tmp_path / "x")]
        )
        assert rc == 2

    def test_layout_phase_from_base(self, tmp_path, cfg_path, dataset, base_run):
        out = tmp_path / "layout"
        rc = main(
            ["train", "--config", cfg_path, "--phase", "layout", "--steps", "3",
             "--data", str(dataset), "--base-checkpoint", str(base_run / "model.ckpt"),
             "--out", str(out)]
        )
        assert rc == 0
        tensors, meta = load_checkpoint(out / "model.ckpt")
        assert meta["phase"] == "layout"
        assert any(name.startswith("assemble.") for name in tensors)
        assert any(name.startswith("layout_encoder.") for name in tensors)

    def test_resume_continues_step_counter(self, tmp_path, cfg_path, dataset, base_run):
        out = tmp_path / "resumed"
        rc = main(
            ["train", "--config", cfg_path, "--phase", "base", "--steps", "6",
             "--data", str(dataset), "--resume", str(base_run / "model.ckpt"),
             "--out", str(out)]
        )
        assert rc == 0
        _, meta = load_checkpoint(out / "model.ckpt")
        assert meta["step"] == 6
        rows = (out / "loss_log.csv").read_text().strip().splitlines()
        assert [r.split(",")[0] for r in rows] == ["4", "5"]

    def test_resume_rejects_phase_mismatch(self, tmp_path, cfg_path, dataset, base_run):
        rc = main(
            ["train", "--config", cfg_path, "--phase", "layout", "--steps", "6",
             "--data", str(dataset), "--resume", str(base_run / "model.ckpt"),
             "--out", str(tmp_path / "x")]
        )
        assert rc == 2

    def test_incompatible_base_checkpoint(self, tmp_path, cfg_path, dataset, base_run):
        other = dict(TINY, model=dict(TINY["model"], width=24, heads=3))
        other_path = tmp_path / "other.json"
        other_path.write_text(json.dumps(other))
        rc = main(
            ["train", "--config", str(other_path), "--phase", "layout", "--steps", "2",
             "--data", str(dataset), "--base-checkpoint", str(base_run / "model.ckpt"),
             "--out", str(tmp_path / "x")]
        )
        assert rc == 2


class TestSample:
    def test_writes_png_deterministically(self, tmp_path, cfg_path, dataset, base_run):
        ann = str(sorted((dataset / "annotations").glob("*.json"))[0])
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            rc = main(
                ["sample", "--checkpoint", str(base_run / "model.ckpt"),
                 "--annotation", ann, "--seed", "5", "--out", str(out)]
            )
            assert rc == 0
            outs.append((out / "sample.png").read_bytes())
        assert outs[0] == outs[1]
        out3 = tmp_path / "s3"
        rc = main(
            ["sample", "--checkpoint", str(base_run / "model.ckpt"),
             "--annotation", ann, "--seed", "6", "--out", str(out3)]
        )
        assert rc == 0
        assert (out3 / "sample.png").read_bytes() != outs[0]

    def test_missing_checkpoint(self, tmp_path, dataset):
        ann = str(sorted((dataset / "annotations").glob("*.json"))[0])
        rc = main(
            ["sample", "--checkpoint", str(tmp_path / "nope.ckpt"),
             "--annotation", ann, "--out", str(tmp_path / "s")]
        )
        assert rc == 2

    def test_corrupt_checkpoint(self, tmp_path, dataset):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        ann = str(sorted((dataset / "annotations").glob("*.json"))[0])
        rc = main(
            ["sample", "--checkpoint", str(bad), "--annotation", ann,
             "--out", str(tmp_path / "s")]
        )
        assert rc == 3


class TestEval:
    def test_ground_truth_bypass(self, tmp_path, cfg_path, dataset):
        out = tmp_path / "ev"
        rc = main(["eval", "--config", cfg_path, "--data", str(dataset), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["miou"] == pytest.approx(1.0)
        assert report["gated_count"] == report["n_instances"]
        assert len(report["per_image"]) == 4

    def test_eval_with_checkpoint(self, tmp_path, cfg_path, dataset, base_run):
        out = tmp_path / "ev"
        rc = main(
            ["eval", "--config", cfg_path, "--data", str(dataset),
             "--checkpoint", str(base_run / "model.ckpt"), "--steps", "2", "--out", str(out)]
        )
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["miou"] <= 1.0
        saved = load_run_config(out / "config.json")
        assert saved.sample.steps == 2  # effective config reflects the override

    def test_missing_data_dir(self, tmp_path, cfg_path):
        rc = main(
            ["eval", "--config", cfg_path, "--data", str(tmp_path / "nothing"),
             "--out", str(tmp_path / "ev")]
        )
        assert rc == 2  # not a dataset directory -> config error


class TestAblate:
    def test_rows_written(self, tmp_path, cfg_path, dataset, base_run):
        out = tmp_path / "ab"
        rc = main(
            ["ablate", "--config", cfg_path, "--data", str(dataset), "--steps", "2",
             "--base-checkpoint", str(base_run / "model.ckpt"),
             "--layout-ratio", "1.0", "--out", str(out)]
        )
        assert rc == 0
        rows = json.loads((out / "ablation.json").read_text())["rows"]
        assert [r["name"] for r in rows] == [
            "full", "no-assemble", "no-cascade", "no-lora", "no-densesample"
        ]
        assert all(0.0 <= r["miou"] <= 1.0 for r in rows)
        assert rows[1]["toggles"]["use_assemble"] is False
        assert rows[0]["toggles"] == {
            "use_assemble": True, "use_cascade": True,
            "use_lora": True, "use_densesample": True,
        }

    def test_requires_base_checkpoint(self, tmp_path, cfg_path, dataset):
        rc = main(
            ["ablate", "--config", cfg_path, "--data", str(dataset), "--steps", "1",
             "--out", str(tmp_path / "ab")]
        )
        assert rc == 2


class TestConfigHandling:
    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {}, "bogus": {}}))
        rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_unknown_field_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"widht": 32}}))
        rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_toggle_recorded_in_checkpoint(self, tmp_path, cfg_path, dataset, base_run):
        out = tmp_path / "noasm"
        rc = main(
            ["train", "--config", cfg_path, "--no-assemble", "--phase", "layout",
             "--steps", "2", "--data", str(dataset),
             "--base-checkpoint", str(base_run / "model.ckpt"), "--out", str(out)]
        )
        assert rc == 0
        _, meta = load_checkpoint(out / "model.ckpt")
        assert meta["config"]["model"]["use_assemble"] is False
