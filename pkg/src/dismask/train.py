"""Adversarial training loop with checkpointed determinism.

One master seed spawns named substreams (weight init, code sampling,
perturbation, data) so that a run is a pure function of (config, dataset)
and a resumed run is a bit-exact continuation of the interrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, data, losses
from .errors import IncompatibleCheckpointError, TrainDivergedError
from .netcore import ArchConfig, ModelBundle

PS_MODES = ("ps", "info_mse", "off")
K_SCHEDULES = ("random", "sequential_1k")


@dataclass
class TrainConfig:
    lam: float = 0.01
    p_var: float = 0.2
    d: int = 10
    num_rects: int = 6
    mask_mode: str = "sc"
    ps_mode: str = "ps"
    k_schedule: str = "random"
    batch_size: int = 32
    total_images: int = 100_000
    adam_lr: float = 0.002
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    seed: int = 0
    checkpoint_every: int = 0  # images; 0 disables periodic checkpoints
    img_channels: int = 1
    base_channels: int = 64
    stage_channels: tuple[int, ...] | None = None  # None: ArchConfig default

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.p_var <= 0:
            raise ValueError("p_var must be > 0")
        if self.total_images and self.total_images < self.batch_size:
            raise ValueError("total_images must be >= batch_size")
        if self.ps_mode not in PS_MODES:
            raise ValueError(f"unknown ps_mode {self.ps_mode!r}")
        if self.k_schedule not in K_SCHEDULES:
            raise ValueError(f"unknown k_schedule {self.k_schedule!r}")

    def arch(self) -> ArchConfig:
        kwargs = dict(
            d=self.d,
            num_rects=self.num_rects,
            mask_mode=self.mask_mode,
            img_channels=self.img_channels,
            base_channels=self.base_channels,
        )
        if self.stage_channels is not None:
            kwargs["stage_channels"] = tuple(self.stage_channels)
            kwargs["resolution"] = 4 * 2 ** len(self.stage_channels)
        return ArchConfig(**kwargs)


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizers: dict[str, torch.optim.Adam]
    rng_codes: torch.Generator
    rng_perturb: torch.Generator
    rng_data: np.random.Generator
    step: int = 0
    images_seen: int = 0
    schedule: losses.SequentialKSchedule | None = field(default=None)


def _substream_seeds(seed: int) -> dict[str, int]:
    names = ("init", "codes", "perturb", "data")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {
        name: int(child.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)
        for name, child in zip(names, children)
    }


def _make_optimizers(config: TrainConfig, bundle: ModelBundle):
    betas = (config.adam_beta1, config.adam_beta2)
    return {
        role: torch.optim.Adam(module.parameters(), lr=config.adam_lr, betas=betas)
        for role, module in bundle.modules_by_role().items()
    }


def init_state(config: TrainConfig) -> TrainState:
    seeds = _substream_seeds(config.seed)
    bundle = ModelBundle.build(config.arch(), seed=seeds["init"])
    schedule = None
    if config.k_schedule == "sequential_1k":
        schedule = losses.SequentialKSchedule(config.d, window=1000)
    return TrainState(
        config=config,
        bundle=bundle,
        optimizers=_make_optimizers(config, bundle),
        rng_codes=torch.Generator().manual_seed(seeds["codes"]),
        rng_perturb=torch.Generator().manual_seed(seeds["perturb"]),
        rng_data=np.random.Generator(np.random.PCG64(seeds["data"])),
        schedule=schedule,
    )


def _sample_codes(state: TrainState, batch: int) -> torch.Tensor:
    return torch.randn(batch, state.config.d, generator=state.rng_codes)


def _set_grads(params, grads):
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


def train_step(state: TrainState, real_batch: np.ndarray) -> dict:
    """One discriminator update followed by one generator+recognizer update."""
    cfg = state.config
    g = state.bundle.generator
    d_net = state.bundle.discriminator
    q_net = state.bundle.recognizer
    real = torch.as_tensor(np.asarray(real_batch, dtype=np.float32))
    batch = real.shape[0]

    # Discriminator update on a detached fake batch.
    with torch.no_grad():
        fake = g(_sample_codes(state, batch))
    real_logits = d_net(real).squeeze(-1)
    fake_logits = d_net(fake).squeeze(-1)
    loss_d, _ = losses.gan_losses(real_logits, fake_logits)
    opt_d = state.optimizers["discriminator"]
    opt_d.zero_grad(set_to_none=False)
    loss_d.backward()
    opt_d.step()

    # Generator (+ recognizer) update.
    codes = _sample_codes(state, batch)
    x = g(codes)
    adv_logits = d_net(x).squeeze(-1)
    _, loss_g = losses.gan_losses(real_logits.detach(), adv_logits)

    if cfg.ps_mode == "off":
        loss_ps = torch.zeros(())
        opt_g = state.optimizers["generator"]
        opt_g.zero_grad(set_to_none=False)
        loss_g.backward()
        opt_g.step()
    else:
        codes_prime, samp = losses.sample_perturbation(
            codes,
            state.rng_perturb,
            cfg.p_var,
            schedule_state=state.schedule,
            images_seen=state.images_seen,
        )
        x_prime = g(codes_prime)
        c_hat = q_net(x)
        c_hat_prime = q_net(x_prime)
        if cfg.ps_mode == "ps":
            loss_ps = losses.ps_loss(codes, codes_prime, c_hat, c_hat_prime, samp.k)
        else:
            loss_ps = 0.5 * (
                losses.info_mse_loss(codes, c_hat)
                + losses.info_mse_loss(codes_prime, c_hat_prime)
            )
        loss_total = losses.total_loss(loss_g, loss_ps, cfg.lam)
        g_params = list(g.parameters())
        q_params = list(q_net.parameters())
        g_grads = torch.autograd.grad(
            loss_total, g_params, retain_graph=True, allow_unused=True
        )
        # The recognizer learns from the unweighted reconstruction term so it
        # remains an encoder even when lambda is tiny.
        q_grads = torch.autograd.grad(loss_ps, q_params, allow_unused=True)
        _set_grads(g_params, g_grads)
        _set_grads(q_params, q_grads)
        state.optimizers["generator"].step()
        state.optimizers["recognizer"].step()

    state.step += 1
    state.images_seen += batch
    record = {
        "images_seen": state.images_seen,
        "loss_D": float(loss_d.item()),
        "loss_G": float(loss_g.item()),
        "loss_PS": float(loss_ps.item()),
    }
    if not all(np.isfinite(v) for v in record.values()):
        raise TrainDivergedError(
            f"non-finite loss at step {state.step}", diagnostics=record
        )
    return record


def _optimizer_state_for_save(state: TrainState) -> dict:
    out = {}
    for role, module in state.bundle.modules_by_role().items():
        opt = state.optimizers[role]
        step_counts = {}
        moments = {}
        for name, p in module.named_parameters():
            s = opt.state.get(p, {})
            if not s:
                continue
            step_counts[name] = int(s["step"].item() if torch.is_tensor(s["step"])
                                    else s["step"])
            moments[name] = {
                "exp_avg": s["exp_avg"],
                "exp_avg_sq": s["exp_avg_sq"],
            }
        out[role] = {"step_counts": step_counts, "moments": moments}
    return out


def save_checkpoint(state: TrainState, directory: str | Path) -> None:
    """Full training checkpoint: params, optimizer moments, RNG states."""
    rng_state = {
        "torch": {
            "codes": state.rng_codes.get_state(),
            "perturb": state.rng_perturb.get_state(),
        },
        "numpy": {"data": state.rng_data.bit_generator.state},
    }
    checkpoint.save_bundle(
        directory,
        state.bundle,
        step=state.step,
        images_seen=state.images_seen,
        seed=state.config.seed,
        optimizer_state=_optimizer_state_for_save(state),
        rng_state=rng_state,
    )


def load_checkpoint(directory: str | Path, config: TrainConfig) -> TrainState:
    """Restore a training state; the checkpoint must match ``config``."""
    bundle, manifest = checkpoint.load_bundle(directory)
    expected = config.arch().to_dict()
    if manifest["arch"] != expected:
        raise IncompatibleCheckpointError(
            f"checkpoint architecture {manifest['arch']} does not match the "
            f"configured architecture {expected}"
        )
    state = init_state(config)
    state.bundle = bundle
    state.optimizers = _make_optimizers(config, bundle)
    state.step = int(manifest["step"])
    state.images_seen = int(manifest["images_seen"])

    opt_state = checkpoint.load_optimizer_state(directory, manifest)
    if opt_state is not None:
        for role, module in bundle.modules_by_role().items():
            opt = state.optimizers[role]
            saved = opt_state.get(role, {"step_counts": {}, "moments": {}})
            for name, p in module.named_parameters():
                if name not in saved["moments"]:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(saved["step_counts"][name])),
                    "exp_avg": saved["moments"][name]["exp_avg"].clone(),
                    "exp_avg_sq": saved["moments"][name]["exp_avg_sq"].clone(),
                }
    rng = checkpoint.load_rng_state(directory, manifest)
    if rng is not None:
        state.rng_codes.set_state(rng["torch"]["codes"])
        state.rng_perturb.set_state(rng["torch"]["perturb"])
        state.rng_data.bit_generator.state = rng["numpy"]["data"]
    return state


def fit(
    config: TrainConfig,
    dataset: data.FactorDataset,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Train for ``config.total_images`` images; returns (bundle, metrics).

    When ``out_dir`` is given, writes an append-only ``metrics.jsonl``,
    periodic checkpoints (``ckpt_<images>``) and a ``final`` checkpoint.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
    else:
        state = init_state(config)
    records: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / "metrics.jsonl").open("a")
    try:
        next_ckpt = None
        if config.checkpoint_every > 0:
            done = state.images_seen // config.checkpoint_every
            next_ckpt = (done + 1) * config.checkpoint_every
        while state.images_seen + config.batch_size <= config.total_images:
            batch = data.sample_batch(dataset, config.batch_size, state.rng_data)
            record = train_step(state, batch)
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if (
                next_ckpt is not None
                and out_dir is not None
                and state.images_seen >= next_ckpt
            ):
                save_checkpoint(state, out_dir / f"ckpt_{state.images_seen:08d}")
                next_ckpt += config.checkpoint_every
        if out_dir is not None:
            save_checkpoint(state, out_dir / "final")
            config_path = out_dir / "train_config.json"
            config_path.write_text(json.dumps(asdict(config), indent=2) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    return state.bundle, records
