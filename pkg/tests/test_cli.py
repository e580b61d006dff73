import csv
import json

import numpy as np
import pytest

from xseg3d import container
from xseg3d.cli import _load_volumes, _save_prediction, main
from xseg3d.rng import Rng
from xseg3d.tensor import Tensor
from xseg3d.unet import Checkpoint, build, save

SMALL = ["--preset", "desk", "--set", "data.synthetic_cases=4", "--set", "data.synthetic_shape=16,24,24"]


def run(*argv):
    return main([str(a) for a in argv])


def manifest(out):
    return [json.loads(line) for line in (out / "manifest.jsonl").read_text().splitlines()]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", *SMALL, "--out", root / "raw") == 0
    assert run("ingest", *SMALL, "--data", root / "raw", "--out", root / "data") == 0
    assert run("split", *SMALL, "--data", root / "data", "--k", 2, "--out", root / "split") == 0
    return root


@pytest.fixture(scope="module")
def eager_checkpoint(tmp_path_factory):
    """Untrained desk-sized model whose head bias makes every voxel positive."""
    from xseg3d.cli import RunConfig

    model = build(RunConfig.resolve(preset="desk", env={}).model_config(), Rng(0))
    model.params["head.bias"] = Tensor(np.full(3, 4.0, dtype=np.float32))
    path = tmp_path_factory.mktemp("ck") / "eager.ckpt"
    save(Checkpoint.from_model(model), path)
    return path


def test_unknown_key_is_a_single_line_error(tmp_path, capsys):
    assert run("synth", "--preset", "desk", "--set", "train.bogus=1", "--out", tmp_path) == 1
    err = capsys.readouterr().err.strip()
    assert "\n" not in err and "unknown key 'bogus'" in err
    cfg = tmp_path / "x.ini"
    cfg.write_text("[nosuch]\na = 1\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "unknown section [nosuch]" in capsys.readouterr().err


def test_bad_value_rejected_before_work(tmp_path, capsys):
    assert run("synth", "--preset", "desk", "--set", "train.batch_size=four", "--out", tmp_path / "o") == 1
    assert "batch_size" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [
    ["synth"],
    ["synth", "--preset", "desk", "--config", "x.ini", "--out", "o"],
    ["train", "--preset", "desk", "--data", "d", "--out", "o"],
    ["explain", "--data", "d", "--checkpoint", "c", "--method", "lime", "--out", "o"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_resolved_config_and_manifest(dataset):
    out = dataset / "split"
    text = (out / "config.resolved.ini").read_text()
    assert "synthetic_shape = 16,24,24" in text and "[train]" in text
    rec = manifest(out)[-1]
    assert rec["command"] == "split" and rec["seed"] == 0
    assert set(rec["outputs"]) == {"folds.csv", "fold_sizes.csv"}
    assert not (out / ".xseg3d.lock").exists()
    with open(out / "folds.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["case_id", "fold"] and len(rows) == 5


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("XSEG3D_SEED", "7")
    assert run("synth", *SMALL, "--out", tmp_path) == 0
    assert manifest(tmp_path)[-1]["seed"] == 7
    assert "seed = 7" in (tmp_path / "config.resolved.ini").read_text()


def test_locked_output_directory(tmp_path, capsys):
    (tmp_path / ".xseg3d.lock").write_text("1")
    assert run("synth", *SMALL, "--out", tmp_path) == 1
    assert "locked" in capsys.readouterr().err


def test_synth_is_deterministic(dataset, tmp_path):
    assert run("synth", *SMALL, "--out", tmp_path) == 0
    assert manifest(tmp_path)[-1]["outputs"] == manifest(dataset / "raw")[-1]["outputs"]


def test_split_300_volume_roster(tmp_path):
    argv = ["--preset", "desk", "--set", "data.synthetic_volumes=300", "--set", "data.synthetic_cases=85",
            "--set", "data.days_per_case=2,5", "--set", "data.synthetic_shape=16,16,16"]
    assert run("synth", *argv, "--out", tmp_path / "raw") == 0
    assert run("split", *argv, "--data", tmp_path / "raw", "--out", tmp_path / "split") == 0
    with open(tmp_path / "split" / "fold_sizes.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    for r in rows:
        assert 235 <= int(r["train_volumes"]) <= 245
        assert 55 <= int(r["val_volumes"]) <= 65
        assert int(r["train_volumes"]) + int(r["val_volumes"]) == 300


def test_evaluate_truth_against_itself(dataset, tmp_path):
    (tmp_path / "p").mkdir()
    for v in _load_volumes(dataset / "data"):
        _save_prediction(tmp_path / "p" / f"{v.key}.xpred", v, v.mask.astype(np.float32), v.mask)
    assert run("evaluate", *SMALL, "--data", dataset / "data", "--pred", tmp_path / "p", "--out", tmp_path / "e") == 0
    with open(tmp_path / "e" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 4 + 1
    assert all(float(r["composite"]) == 1.0 for r in rows)


def test_train_and_finetune_short(dataset, tmp_path):
    short = [*SMALL, "--set", "train.epochs_run1=2", "--set", "train.epochs_run2=1", "--set", "train.validate_every=1"]
    common = ["--data", dataset / "data", "--folds", dataset / "split" / "folds.csv", "--fold", 0]
    assert run("train", *short, *common, "--out", tmp_path) == 0
    assert run("finetune", *short, *common, "--checkpoint", tmp_path / "best.ckpt", "--out", tmp_path) == 0
    with open(tmp_path / "history.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    summary = json.loads((tmp_path / "summary_finetuned.json").read_text())
    assert summary["epochs"] == 1 and 0 <= summary["final_train_soft_dsc"] <= 1
    assert [r["command"] for r in manifest(tmp_path)] == ["train", "finetune"]


def test_ensemble_of_one_equals_predict(dataset, eager_checkpoint, tmp_path):
    args = [*SMALL, "--data", dataset / "data", "--checkpoint"]
    assert run("predict", *args, eager_checkpoint, "--out", tmp_path / "p") == 0
    assert run("ensemble", *args, eager_checkpoint, eager_checkpoint, "--out", tmp_path / "e") == 0
    files = sorted((tmp_path / "p" / "predictions").glob("*.xpred"))
    assert len(files) == 4
    for f in files:
        a, _ = container.load(f)
        b, meta = container.load(tmp_path / "e" / "predictions" / f.name)
        np.testing.assert_array_equal(a["mask"], b["mask"])
        np.testing.assert_allclose(a["probs"], b["probs"], rtol=1e-6)
        assert meta["members"] == 2


def test_explain_deeplift_rerun_checksums_match(dataset, eager_checkpoint, tmp_path):
    args = [*SMALL, "--data", dataset / "data", "--checkpoint", eager_checkpoint, "--method", "deeplift", "--class", 1]
    assert run("explain", *args, "--out", tmp_path / "a") == 0
    assert run("explain", *args, "--out", tmp_path / "b") == 0
    ra, rb = manifest(tmp_path / "a")[-1], manifest(tmp_path / "b")[-1]
    assert ra["outputs"] == rb["outputs"]
    assert ra["summary"]["completeness_rel_err"] < 1e-4
    sidecar = json.loads((tmp_path / "a" / "attributions.jsonl").read_text())
    assert sidecar["sha256"] == ra["summary"]["sha256"]


def test_explain_rejects_bad_class(dataset, eager_checkpoint, tmp_path, capsys):
    args = [*SMALL, "--data", dataset / "data", "--checkpoint", eager_checkpoint, "--class", 3]
    assert run("explain", *args, "--out", tmp_path) == 1
    assert "class 3" in capsys.readouterr().err


def test_render_is_byte_identical(dataset, eager_checkpoint, tmp_path):
    assert run("explain", *SMALL, "--data", dataset / "data", "--checkpoint", eager_checkpoint,
               "--method", "gradcam", "--out", tmp_path) == 0
    attr = next((tmp_path / "attributions").glob("*.xattr"))
    args = [*SMALL, "--data", dataset / "data", "--attribution", attr, "--with-mask"]
    assert run("render", *args, "--name", "a.png", "--out", tmp_path) == 0
    assert run("render", *args, "--name", "b.png", "--out", tmp_path) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert run("render", *args, "--index", 999, "--out", tmp_path) == 1
