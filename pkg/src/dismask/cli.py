"""Command-line operator surface.

One JSON config file describes a run (training hyperparameters, dataset,
metric settings, output directory); command-line flags override config
values. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import checkpoint, data, metrics, train, viz
from .errors import IncompatibleCheckpointError


class ConfigError(Exception):
    pass


_TRAIN_KEYS = {
    "lambda": float,
    "p_var": float,
    "d": int,
    "num_rects": int,
    "mask_mode": str,
    "ps_mode": str,
    "k_schedule": str,
    "batch_size": int,
    "total_images": int,
    "adam": dict,
    "seed": int,
    "checkpoint_every": int,
    "img_channels": int,
    "base_channels": int,
    "stage_channels": list,
}
_ADAM_KEYS = {"lr": float, "beta1": float, "beta2": float}
_DATASET_KEYS = {"type": str, "spec": dict, "path": str, "seed": int}
_METRIC_KEYS = {
    "distance": str,
    "tpl_threshold": float,
    "segments": int,
    "min_active": int,
    "num_base": int,
    "ppl_pairs": int,
    "ppl_epsilon": float,
    "fvm_train_votes": int,
    "fvm_eval_votes": int,
    "fvm_batch": int,
}
_TOP_KEYS = {"train": dict, "dataset": dict, "metrics": dict, "out_dir": str}


def _check_section(section: dict, allowed: dict, where: str) -> None:
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")
        want = allowed[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, want) or isinstance(value, bool):
            raise ConfigError(
                f"{where}.{key} must be {want.__name__}, got {type(value).__name__}"
            )


def load_run_config(path: str) -> dict:
    """Parse and validate a run config; unknown keys are rejected."""
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_section(cfg, _TOP_KEYS, "config")
    _check_section(cfg.get("train", {}), _TRAIN_KEYS, "train")
    _check_section(cfg.get("train", {}).get("adam", {}), _ADAM_KEYS, "train.adam")
    _check_section(cfg.get("dataset", {}), _DATASET_KEYS, "dataset")
    _check_section(cfg.get("metrics", {}), _METRIC_KEYS, "metrics")
    return cfg


def train_config_from(cfg: dict, seed_override: int | None = None) -> train.TrainConfig:
    t = dict(cfg.get("train", {}))
    adam = t.pop("adam", {})
    kwargs = {
        "lam": t.get("lambda", 0.01),
        "p_var": t.get("p_var", 0.2),
        "d": t.get("d", 10),
        "num_rects": t.get("num_rects", 6),
        "mask_mode": t.get("mask_mode", "sc"),
        "ps_mode": t.get("ps_mode", "ps"),
        "k_schedule": t.get("k_schedule", "random"),
        "batch_size": t.get("batch_size", 32),
        "total_images": t.get("total_images", 100_000),
        "adam_lr": adam.get("lr", 0.002),
        "adam_beta1": adam.get("beta1", 0.0),
        "adam_beta2": adam.get("beta2", 0.99),
        "seed": t.get("seed", 0),
        "checkpoint_every": t.get("checkpoint_every", 0),
        "img_channels": t.get("img_channels", 1),
        "base_channels": t.get("base_channels", 64),
        "stage_channels": (
            tuple(t["stage_channels"]) if "stage_channels" in t else None
        ),
    }
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return train.TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dataset_from(cfg: dict) -> data.FactorDataset | None:
    ds = cfg.get("dataset")
    if ds is None:
        return None
    kind = ds.get("type")
    if kind == "procedural":
        return data.make_procedural_dataset(ds.get("spec", {}), seed=ds.get("seed", 0))
    if kind == "dsprites":
        if "path" not in ds:
            raise ConfigError("dsprites dataset requires a 'path'")
        return data.load_dsprites(ds["path"])
    raise ConfigError(f"unknown dataset type {kind!r}")


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _load_bundle_or_fail(ckpt_dir: str):
    try:
        return checkpoint.load_bundle(ckpt_dir)
    except (IncompatibleCheckpointError, OSError) as exc:
        _fail(f"cannot load checkpoint {ckpt_dir!r}: {exc}")


def _metric_settings(cfg: dict, distance, tpl_threshold, segments, min_active):
    m = dict(cfg.get("metrics", {}))
    if distance is not None:
        m["distance"] = distance
    if tpl_threshold is not None:
        m["tpl_threshold"] = tpl_threshold
    if segments is not None:
        m["segments"] = segments
    if min_active is not None:
        m["min_active"] = min_active
    m.setdefault("distance", "pixel_l1")
    m.setdefault("tpl_threshold", 0.01)
    m.setdefault("segments", 50)
    m.setdefault("min_active", 0)
    m.setdefault("num_base", 16)
    m.setdefault("ppl_pairs", 256)
    m.setdefault("ppl_epsilon", 1e-2)
    m.setdefault("fvm_train_votes", 800)
    m.setdefault("fvm_eval_votes", 200)
    m.setdefault("fvm_batch", 64)
    return m


_COMMON = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="JSON run config"),
    click.option("--seed", type=int, default=None, help="override seed"),
    click.option("--out", "out_dir", type=click.Path(), default=None,
                 help="output directory"),
    click.option("--distance",
                 type=click.Choice(metrics.DISTANCE_BACKENDS), default=None),
    click.option("--tpl-threshold", type=float, default=None),
    click.option("--segments", type=int, default=None),
    click.option("--min-active", type=int, default=None),
]


def common_options(fn):
    for opt in reversed(_COMMON):
        fn = opt(fn)
    return fn


def _run_cfg(config_path: str | None) -> dict:
    if config_path is None:
        return {}
    try:
        return load_run_config(config_path)
    except ConfigError as exc:
        raise click.UsageError(str(exc))


def _out_dir(cfg: dict, out_dir: str | None, default: str) -> Path:
    path = Path(out_dir or cfg.get("out_dir") or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
def main():
    """Train, evaluate, rank, and inspect masked-modulation GANs."""


@main.command("train")
@common_options
@click.option("--resume", "resume_from", type=click.Path(), default=None,
              help="checkpoint directory to continue from")
def cmd_train(config_path, seed, out_dir, distance, tpl_threshold, segments,
              min_active, resume_from):
    """Run a training job described by --config."""
    if config_path is None:
        raise click.UsageError("train requires --config")
    cfg = _run_cfg(config_path)
    try:
        tcfg = train_config_from(cfg, seed_override=seed)
        dataset = dataset_from(cfg)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    if dataset is None:
        raise click.UsageError("train requires a dataset section in the config")
    out = _out_dir(cfg, out_dir, "run")
    try:
        train.fit(tcfg, dataset, out_dir=out, resume_from=resume_from)
    except (IncompatibleCheckpointError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"trained {tcfg.total_images} images -> {out}")


@main.command("eval")
@click.argument("checkpoint_dir", type=click.Path())
@common_options
def cmd_eval(checkpoint_dir, config_path, seed, out_dir, distance,
             tpl_threshold, segments, min_active):
    """Write a traversal/PPL (and FVM, if factor labels exist) report."""
    cfg = _run_cfg(config_path)
    m = _metric_settings(cfg, distance, tpl_threshold, segments, min_active)
    bundle, _ = _load_bundle_or_fail(checkpoint_dir)
    generator = metrics.bundle_generator(bundle)
    dist = metrics.make_distance(m["distance"])
    seed = 0 if seed is None else seed
    report = metrics.tpl_total(
        generator,
        dist,
        n_segments=m["segments"],
        threshold=m["tpl_threshold"],
        num_base=m["num_base"],
        rng=np.random.default_rng(seed),
    )
    out = _out_dir(cfg, out_dir, "eval")
    doc = {
        "checkpoint": str(checkpoint_dir),
        "distance": m["distance"],
        "tpl": report.to_dict(),
        "ppl": metrics.ppl(
            generator,
            dist,
            num_pairs=m["ppl_pairs"],
            epsilon=m["ppl_epsilon"],
            rng=np.random.default_rng(seed),
        ),
    }
    try:
        dataset = dataset_from(cfg)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    if dataset is not None and dataset.factor_sizes is not None:
        doc["fvm"] = metrics.factorvae_metric(
            metrics.bundle_encoder(bundle),
            dataset,
            train_votes=m["fvm_train_votes"],
            eval_votes=m["fvm_eval_votes"],
            batch=m["fvm_batch"],
            rng=np.random.default_rng(seed),
        )
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    click.echo(f"report -> {out / 'report.json'}")


@main.command("rank")
@click.argument("checkpoints_root", type=click.Path())
@common_options
def cmd_rank(checkpoints_root, config_path, seed, out_dir, distance,
             tpl_threshold, segments, min_active):
    """Rank every checkpoint under CHECKPOINTS_ROOT by traversal length."""
    cfg = _run_cfg(config_path)
    m = _metric_settings(cfg, distance, tpl_threshold, segments, min_active)
    root = Path(checkpoints_root)
    dirs = sorted(
        str(p.parent) for p in root.glob("*/**/manifest.json")
    ) if root.is_dir() else []
    # also accept direct children that are checkpoints
    if root.is_dir():
        direct = [str(p) for p in sorted(root.iterdir())
                  if (p / "manifest.json").is_file()]
        dirs = sorted(set(dirs) | set(direct))
    if not dirs:
        _fail(f"no checkpoints found under {checkpoints_root!r}")
    rows = metrics.rank_models(
        dirs,
        metrics.make_distance(m["distance"]),
        n_segments=m["segments"],
        threshold=m["tpl_threshold"],
        min_active=m["min_active"],
        num_base=m["num_base"],
        seed=0 if seed is None else seed,
    )
    out = _out_dir(cfg, out_dir, "rank")
    csv_path = out / "ranking.csv"
    max_d = max((len(r.get("tpl_per_dim", [])) for r in rows), default=0)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["rank", "model_dir", "tpl_total", "num_active", "status"]
            + [f"tpl_{i}" for i in range(max_d)]
        )
        for r in rows:
            per_dim = r.get("tpl_per_dim", [])
            writer.writerow(
                [
                    r.get("rank", ""),
                    r["model_dir"],
                    r.get("tpl_total", ""),
                    r.get("num_active", ""),
                    r["status"],
                ]
                + [f"{v:.9g}" for v in per_dim]
                + [""] * (max_d - len(per_dim))
            )
    click.echo(f"ranking -> {csv_path}")


def _parse_dims(text: str | None, d: int) -> list[int]:
    if text is None or text == "":
        return list(range(d))
    try:
        dims = [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise click.UsageError(f"bad dims list {text!r}")
    for dim in dims:
        if not 0 <= dim < d:
            _fail(f"dim {dim} out of range for d={d}")
    return dims


@main.command("traverse")
@click.argument("checkpoint_dir", type=click.Path())
@common_options
@click.option("--dims", default=None, help="comma-separated dims (default all)")
@click.option("--range", "value_range", type=float, default=4.0,
              help="traverse [-range, range]")
@click.option("--steps", type=int, default=7)
@click.option("--gif/--no-gif", default=False)
def cmd_traverse(checkpoint_dir, config_path, seed, out_dir, distance,
                 tpl_threshold, segments, min_active, dims, value_range,
                 steps, gif):
    """Export a traversal grid (rows: dims by descending tpl_i) + masks."""
    cfg = _run_cfg(config_path)
    m = _metric_settings(cfg, distance, tpl_threshold, segments, min_active)
    bundle, _ = _load_bundle_or_fail(checkpoint_dir)
    generator = metrics.bundle_generator(bundle)
    dim_list = _parse_dims(dims, bundle.arch.d)
    seed = 0 if seed is None else seed
    dist = metrics.make_distance(m["distance"])
    rng = np.random.default_rng(seed)
    tpl_by_dim = {
        i: metrics.tpl_dim(generator, i, dist, m["segments"], m["num_base"], rng)
        for i in dim_list
    }
    ordered = sorted(dim_list, key=lambda i: -tpl_by_dim[i])
    values = np.linspace(-value_range, value_range, steps)

    import torch

    base = np.zeros((1, bundle.arch.d), dtype=np.float32)
    masks = bundle.generator.dim_masks(torch.from_numpy(base))
    rows = []
    frames_per_step: list[list[np.ndarray]] = [[] for _ in range(steps)]
    for i in ordered:
        codes = np.repeat(base, steps, axis=0)
        codes[:, i] = values
        imgs = generator(codes)
        tiles = [viz.to_uint8(img) for img in imgs]
        mid = imgs[steps // 2]
        mask_tile = viz.mask_overlay(mid, masks[i][0].numpy())
        rows.append(tiles + [mask_tile])
        for s in range(steps):
            frames_per_step[s].append(tiles[s])
    out = _out_dir(cfg, out_dir, "traverse")
    viz.save_png(out / "grid.png", viz.tile_grid(rows))
    if gif:
        frames = [viz.tile_grid([row]) for row in
                  [list(col) for col in frames_per_step]]
        viz.save_gif(out / "traversal.gif", frames)
    (out / "tpl_order.json").write_text(
        json.dumps({"order": ordered,
                    "tpl_per_dim": {str(k): v for k, v in tpl_by_dim.items()}},
                   indent=2, sort_keys=True) + "\n"
    )
    click.echo(f"grid -> {out / 'grid.png'}")


@main.command("edit")
@click.argument("checkpoint_dir", type=click.Path())
@common_options
@click.option("--source-seed", type=int, default=1)
@click.option("--donor-seed", type=int, default=2)
@click.option("--dims", default="", help="dims to copy from donor (may be empty)")
def cmd_edit(checkpoint_dir, config_path, seed, out_dir, distance,
             tpl_threshold, segments, min_active, source_seed, donor_seed, dims):
    """Copy donor latent dims into a source code and render the triplet."""
    cfg = _run_cfg(config_path)
    bundle, _ = _load_bundle_or_fail(checkpoint_dir)
    generator = metrics.bundle_generator(bundle)
    d = bundle.arch.d
    dim_list = _parse_dims(dims, d) if dims else []
    source = np.random.default_rng(source_seed).standard_normal((1, d))
    donor = np.random.default_rng(donor_seed).standard_normal((1, d))
    edited = source.copy()
    edited[0, dim_list] = donor[0, dim_list]
    imgs = generator(np.concatenate([source, donor, edited], axis=0))
    out = _out_dir(cfg, out_dir, "edit")
    viz.save_png(out / "edit.png", viz.tile_grid([[viz.to_uint8(i) for i in imgs]]))
    click.echo(f"edit -> {out / 'edit.png'}")


@main.command("rotate-sweep")
@click.argument("checkpoint_dir", type=click.Path())
@common_options
@click.option("--dims", required=True, help="two dims, e.g. 0,1")
@click.option("--alpha-min", type=float, default=-90.0)
@click.option("--alpha-max", type=float, default=180.0)
@click.option("--alpha-step", type=float, default=5.0)
def cmd_rotate_sweep(checkpoint_dir, config_path, seed, out_dir, distance,
                     tpl_threshold, segments, min_active, dims, alpha_min,
                     alpha_max, alpha_step):
    """Accumulated-distance rotation sweep over a 2-D latent plane."""
    cfg = _run_cfg(config_path)
    m = _metric_settings(cfg, distance, tpl_threshold, segments, min_active)
    bundle, _ = _load_bundle_or_fail(checkpoint_dir)
    generator = metrics.bundle_generator(bundle)
    dim_list = _parse_dims(dims, bundle.arch.d)
    if len(dim_list) != 2 or dim_list[0] == dim_list[1]:
        raise click.UsageError("rotate-sweep needs exactly two distinct dims")
    alphas = np.arange(alpha_min, alpha_max + 1e-9, alpha_step)
    curve = metrics.dis_cum_sweep(
        generator,
        (dim_list[0], dim_list[1]),
        metrics.make_distance(m["distance"]),
        m["segments"],
        alphas,
    )
    out = _out_dir(cfg, out_dir, "sweep")
    csv_path = out / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha_degrees", "dis_cum"])
        for alpha, value in curve:
            writer.writerow([f"{alpha:.9g}", f"{value:.9g}"])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([a for a, _ in curve], [v for _, v in curve])
    ax.set_xlabel("rotation (degrees)")
    ax.set_ylabel("accumulated distance")
    fig.tight_layout()
    fig.savefig(out / "sweep.png", metadata={"Software": None})
    plt.close(fig)
    click.echo(f"sweep -> {csv_path}")


if __name__ == "__main__":
    main()
