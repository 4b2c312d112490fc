import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from dismask import cli, metrics
from dismask.cli import ConfigError, load_run_config, main

TINY_SPEC = {
    "factors": [{"name": "x", "size": 3}, {"name": "y", "size": 3}],
    "image_size": 16,
}

TINY_CONFIG = {
    "train": {
        "lambda": 0.01,
        "d": 3,
        "num_rects": 2,
        "batch_size": 8,
        "total_images": 16,
        "seed": 5,
        "base_channels": 6,
        "stage_channels": [4, 3],
    },
    "dataset": {"type": "procedural", "spec": TINY_SPEC, "seed": 0},
    "metrics": {
        "distance": "pixel_l1",
        "segments": 4,
        "num_base": 2,
        "ppl_pairs": 8,
        "fvm_train_votes": 40,
        "fvm_eval_votes": 10,
        "fvm_batch": 16,
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A config file plus one trained tiny checkpoint, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    run_dir = root / "run"
    result = CliRunner().invoke(
        main, ["train", "--config", str(cfg_path), "--out", str(run_dir)]
    )
    assert result.exit_code == 0, result.output
    return {"root": root, "config": cfg_path, "ckpt": run_dir / "final"}


def _read_all_bytes(directory):
    return {
        p.relative_to(directory).as_posix(): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file()
    }


def test_load_run_config_validation(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"lambda": 0.1}}))
    assert load_run_config(str(path))["train"]["lambda"] == 0.1
    path.write_text(json.dumps({"train": {"lambdda": 0.1}}))
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text(json.dumps({"train": {"d": "ten"}}))
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text(json.dumps({"train": {"d": True}}))
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.json"))
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_train_requires_config():
    result = CliRunner().invoke(main, ["train"])
    assert result.exit_code == 2


def test_train_rejects_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lambda": -1.0}}))
    result = CliRunner().invoke(main, ["train", "--config", str(bad)])
    assert result.exit_code == 2


def test_train_requires_dataset(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": TINY_CONFIG["train"]}))
    result = CliRunner().invoke(main, ["train", "--config", str(cfg)])
    assert result.exit_code == 2


def test_train_is_byte_deterministic(workspace, tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        result = CliRunner().invoke(
            main, ["train", "--config", str(workspace["config"]), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        outs.append(_read_all_bytes(out))
    assert outs[0] == outs[1]


def test_eval_writes_report_matching_module(workspace, tmp_path):
    out = tmp_path / "eval"
    result = CliRunner().invoke(
        main,
        ["eval", str(workspace["ckpt"]), "--config", str(workspace["config"]),
         "--out", str(out), "--seed", "3"],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert set(report) >= {"tpl", "ppl", "fvm", "distance"}

    from dismask import checkpoint as ckpt_mod

    bundle, _ = ckpt_mod.load_bundle(workspace["ckpt"])
    want = metrics.tpl_total(
        metrics.bundle_generator(bundle),
        metrics.PixelL1(),
        n_segments=4,
        num_base=2,
        rng=np.random.default_rng(3),
    )
    assert report["tpl"]["tpl_total"] == pytest.approx(want.tpl_total)
    assert report["tpl"]["tpl_per_dim"] == pytest.approx(list(want.tpl_per_dim))
    assert 0.0 <= report["fvm"] <= 1.0


def test_eval_is_byte_deterministic(workspace, tmp_path):
    docs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        result = CliRunner().invoke(
            main,
            ["eval", str(workspace["ckpt"]), "--config", str(workspace["config"]),
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        docs.append((out / "report.json").read_bytes())
    assert docs[0] == docs[1]


def test_eval_missing_checkpoint_fails(workspace, tmp_path):
    result = CliRunner().invoke(
        main, ["eval", str(tmp_path / "nope"), "--config", str(workspace["config"])]
    )
    assert result.exit_code == 1


def test_rank_over_checkpoints(workspace, tmp_path):
    csvs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        result = CliRunner().invoke(
            main,
            ["rank", str(workspace["ckpt"].parent),
             "--config", str(workspace["config"]), "--out", str(out),
             "--tpl-threshold", "0"],
        )
        assert result.exit_code == 0, result.output
        csvs.append((out / "ranking.csv").read_bytes())
    assert csvs[0] == csvs[1]
    lines = csvs[0].decode().splitlines()
    assert lines[0].startswith("rank,model_dir,tpl_total,num_active,status")
    assert len(lines) >= 2


def test_rank_empty_root_fails(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = CliRunner().invoke(main, ["rank", str(empty)])
    assert result.exit_code == 1


def test_traverse_outputs(workspace, tmp_path):
    grids = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        result = CliRunner().invoke(
            main,
            ["traverse", str(workspace["ckpt"]),
             "--config", str(workspace["config"]), "--out", str(out),
             "--steps", "3", "--gif"],
        )
        assert result.exit_code == 0, result.output
        assert (out / "traversal.gif").is_file()
        order = json.loads((out / "tpl_order.json").read_text())
        assert sorted(order["order"]) == [0, 1, 2]
        tpls = [order["tpl_per_dim"][str(i)] for i in order["order"]]
        assert tpls == sorted(tpls, reverse=True)
        grids.append(_read_all_bytes(out))
    assert grids[0] == grids[1]


def test_traverse_rejects_bad_dims(workspace, tmp_path):
    result = CliRunner().invoke(
        main,
        ["traverse", str(workspace["ckpt"]), "--dims", "0,9",
         "--out", str(tmp_path / "t")],
    )
    assert result.exit_code == 1
    result = CliRunner().invoke(
        main,
        ["traverse", str(workspace["ckpt"]), "--dims", "zero",
         "--out", str(tmp_path / "t2")],
    )
    assert result.exit_code == 2


def _edit_tiles(png_path, n_tiles=3, size=16, pad=2):
    img = np.asarray(Image.open(png_path))
    tiles = []
    for c in range(n_tiles):
        x = pad + c * (size + pad)
        tiles.append(img[pad : pad + size, x : x + size])
    return tiles


def test_edit_semantics(workspace, tmp_path):
    out_none = tmp_path / "none"
    result = CliRunner().invoke(
        main, ["edit", str(workspace["ckpt"]), "--out", str(out_none)]
    )
    assert result.exit_code == 0, result.output
    source, donor, edited = _edit_tiles(out_none / "edit.png")
    np.testing.assert_array_equal(edited, source)  # no dims copied

    out_all = tmp_path / "all"
    result = CliRunner().invoke(
        main,
        ["edit", str(workspace["ckpt"]), "--dims", "0,1,2", "--out", str(out_all)],
    )
    assert result.exit_code == 0, result.output
    source, donor, edited = _edit_tiles(out_all / "edit.png")
    np.testing.assert_array_equal(edited, donor)  # full code swap


def test_rotate_sweep_outputs(workspace, tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        result = CliRunner().invoke(
            main,
            ["rotate-sweep", str(workspace["ckpt"]), "--dims", "0,1",
             "--config", str(workspace["config"]), "--out", str(out),
             "--alpha-min", "0", "--alpha-max", "90", "--alpha-step", "45"],
        )
        assert result.exit_code == 0, result.output
        outs.append(_read_all_bytes(out))
    assert outs[0] == outs[1]
    lines = (outs[0]["sweep.csv"]).decode().splitlines()
    assert lines[0] == "alpha_degrees,dis_cum"
    assert len(lines) == 4  # header + 0, 45, 90
    assert "sweep.png" in outs[0]


def test_rotate_sweep_needs_two_distinct_dims(workspace, tmp_path):
    result = CliRunner().invoke(
        main,
        ["rotate-sweep", str(workspace["ckpt"]), "--dims", "1,1",
         "--out", str(tmp_path / "s")],
    )
    assert result.exit_code == 2


def test_dataset_from_rejects_unknown_type():
    with pytest.raises(cli.ConfigError):
        cli.dataset_from({"dataset": {"type": "voxels"}})
    with pytest.raises(cli.ConfigError):
        cli.dataset_from({"dataset": {"type": "dsprites"}})
    assert cli.dataset_from({}) is None
