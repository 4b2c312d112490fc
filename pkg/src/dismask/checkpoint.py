"""Checkpoint directory format.

A checkpoint is a directory with a ``manifest.json`` (architecture config,
parameter names/shapes/dtypes, counters, seed, optional optimizer and RNG
sections) plus one raw little-endian float32 row-major binary file per named
parameter. Optimizer moments use the same binary layout; RNG states are raw
uint8 files (torch) or JSON-embedded state dicts (numpy).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import IncompatibleCheckpointError
from .netcore import ArchConfig, ModelBundle

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _bin_name(name: str) -> str:
    return name.replace("/", "__").replace(".", "_") + ".bin"


def _write_f32(path: Path, tensor: torch.Tensor) -> None:
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
    path.write_bytes(arr.tobytes())


def _read_f32(path: Path, shape: list[int]) -> torch.Tensor:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.copy())


def _named_params(bundle: ModelBundle) -> dict[str, torch.Tensor]:
    out = {}
    for role, module in bundle.modules_by_role().items():
        for name, p in module.named_parameters():
            out[f"{role}/{name}"] = p
    return out


def save_bundle(
    directory: str | Path,
    bundle: ModelBundle,
    step: int = 0,
    images_seen: int = 0,
    seed: int = 0,
    optimizer_state: dict | None = None,
    rng_state: dict | None = None,
) -> None:
    """Write a checkpoint directory; overwrites existing files in place."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params_meta = {}
    for name, p in _named_params(bundle).items():
        fname = _bin_name(name)
        _write_f32(directory / fname, p)
        params_meta[name] = {
            "shape": list(p.shape),
            "dtype": "float32",
            "file": fname,
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": bundle.arch.to_dict(),
        "step": step,
        "images_seen": images_seen,
        "seed": seed,
        "params": params_meta,
    }
    if optimizer_state is not None:
        opt_meta = {}
        for role, state in optimizer_state.items():
            role_meta = {"step_counts": state["step_counts"], "moments": {}}
            for pname, moments in state["moments"].items():
                entry = {}
                for mname, tensor in moments.items():
                    fname = _bin_name(f"opt__{role}__{pname}__{mname}")
                    _write_f32(directory / fname, tensor)
                    entry[mname] = {"shape": list(tensor.shape), "file": fname}
                role_meta["moments"][pname] = entry
            opt_meta[role] = role_meta
        manifest["optimizer"] = opt_meta
    if rng_state is not None:
        rng_meta = {"torch": {}, "numpy": rng_state.get("numpy", {})}
        for stream, state in rng_state.get("torch", {}).items():
            fname = _bin_name(f"rng__{stream}")
            (directory / fname).write_bytes(state.numpy().tobytes())
            rng_meta["torch"][stream] = {"file": fname, "size": state.numel()}
        manifest["rng"] = rng_meta
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(directory / MANIFEST_NAME)


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise IncompatibleCheckpointError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"unsupported checkpoint format version in {path}"
        )
    return manifest


def load_bundle(directory: str | Path) -> tuple[ModelBundle, dict]:
    """Rebuild a model bundle from a checkpoint; returns (bundle, manifest)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    arch = ArchConfig.from_dict(manifest["arch"])
    bundle = ModelBundle.build(arch, seed=0)
    expected = _named_params(bundle)
    saved = manifest["params"]
    if set(saved) != set(expected):
        raise IncompatibleCheckpointError(
            "checkpoint parameter names do not match the architecture config"
        )
    with torch.no_grad():
        for name, meta in saved.items():
            p = expected[name]
            if list(p.shape) != meta["shape"]:
                raise IncompatibleCheckpointError(
                    f"shape mismatch for {name}: manifest {meta['shape']} vs "
                    f"model {list(p.shape)}"
                )
            p.copy_(_read_f32(directory / meta["file"], meta["shape"]))
    return bundle, manifest


def load_optimizer_state(directory: str | Path, manifest: dict) -> dict | None:
    if "optimizer" not in manifest:
        return None
    directory = Path(directory)
    out = {}
    for role, role_meta in manifest["optimizer"].items():
        moments = {}
        for pname, entry in role_meta["moments"].items():
            moments[pname] = {
                mname: _read_f32(directory / m["file"], m["shape"])
                for mname, m in entry.items()
            }
        out[role] = {"step_counts": role_meta["step_counts"], "moments": moments}
    return out


def load_rng_state(directory: str | Path, manifest: dict) -> dict | None:
    if "rng" not in manifest:
        return None
    directory = Path(directory)
    torch_states = {}
    for stream, meta in manifest["rng"]["torch"].items():
        raw = (directory / meta["file"]).read_bytes()
        torch_states[stream] = torch.from_numpy(
            np.frombuffer(raw, dtype=np.uint8).copy()
        )
    return {"torch": torch_states, "numpy": manifest["rng"]["numpy"]}
