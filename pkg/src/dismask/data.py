"""Dataset ingestion: published factor datasets and a procedural renderer.

Images are stored 8-bit and converted to channel-first float batches in
[-1, 1] on access. Datasets with factor metadata carry the factor grid
(cardinalities plus per-image integer factor values) used by the
majority-vote disentanglement metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_GRID_CAP = 200_000

# Recognized procedural factor names, in the order they are rendered.
PROCEDURAL_FACTORS = ("x", "y", "scale", "intensity")


@dataclass
class FactorDataset:
    """Image corpus, optionally with a complete ground-truth factor grid."""

    images_u8: np.ndarray  # (N, C, H, W) uint8
    factor_sizes: tuple[int, ...] | None = None
    factor_values: np.ndarray | None = None  # (N, F) int64
    _grid_index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.factor_sizes is not None:
            n = int(np.prod(self.factor_sizes))
            if len(self.images_u8) != n:
                raise ValueError(
                    f"grid dataset must have N = prod(factor_sizes) = {n}, "
                    f"got {len(self.images_u8)}"
                )

    def __len__(self) -> int:
        return len(self.images_u8)

    @property
    def num_factors(self) -> int:
        if self.factor_sizes is None:
            raise ValueError("dataset has no factor metadata")
        return len(self.factor_sizes)

    def images_at(self, indices: np.ndarray) -> np.ndarray:
        """Float32 images in [-1, 1] for the given indices."""
        return self.images_u8[indices].astype(np.float32) / 127.5 - 1.0

    def index_of_factors(self, values: np.ndarray) -> np.ndarray:
        """Image indices for rows of integer factor values."""
        if self.factor_values is None:
            raise ValueError("dataset has no factor metadata")
        if self._grid_index is None:
            n = int(np.prod(self.factor_sizes))
            lookup = np.full(n, -1, dtype=np.int64)
            flat = np.ravel_multi_index(self.factor_values.T, self.factor_sizes)
            lookup[flat] = np.arange(len(self))
            if (lookup < 0).any():
                raise ValueError("factor grid is incomplete")
            self._grid_index = lookup
        flat = np.ravel_multi_index(np.asarray(values).T, self.factor_sizes)
        return self._grid_index[flat]


def load_dsprites(path: str) -> FactorDataset:
    """Load the published binary-shapes archive (zip of NPY arrays).

    Expects keys ``imgs`` (uint8, N x 64 x 64, values in {0, 1}) and
    ``latents_classes`` (int64, N x 6 with a constant first column).
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            imgs = archive["imgs"]
            classes = archive["latents_classes"]
    except (OSError, KeyError, ValueError) as exc:
        raise OSError(
            f"cannot read dataset archive {path!r}: expected a zip of NPY "
            "arrays with keys 'imgs' (uint8 N x 64 x 64) and "
            f"'latents_classes' (int64 N x 6); {exc}"
        ) from exc
    if imgs.ndim != 3 or imgs.shape[1:] != (64, 64):
        raise OSError(
            f"unexpected image array shape {imgs.shape}; expected (N, 64, 64)"
        )
    factor_sizes = (3, 6, 40, 32, 32)
    expected_n = int(np.prod(factor_sizes))
    if len(imgs) != expected_n:
        raise OSError(
            f"expected {expected_n} images, found {len(imgs)}"
        )
    images_u8 = (imgs.astype(np.uint8) * 255)[:, None]
    factor_values = classes[:, 1:].astype(np.int64)
    return FactorDataset(
        images_u8=images_u8,
        factor_sizes=factor_sizes,
        factor_values=factor_values,
    )


def _render_square(
    canvas: np.ndarray, cx: float, cy: float, half: float, value: int
) -> None:
    size = canvas.shape[0]
    ys = np.arange(size)
    row = (np.abs(ys - cy) <= half)
    col = (np.abs(ys - cx) <= half)
    canvas[np.ix_(row, col)] = value


def make_procedural_dataset(
    spec: dict, seed: int = 0, grid_cap: int = DEFAULT_GRID_CAP
) -> FactorDataset:
    """Render an exhaustive factor grid of filled squares.

    ``spec`` is ``{"factors": [{"name", "size"}, ...], "image_size": int}``
    with factor names drawn from x-position, y-position, scale, and
    intensity. The grid enumerates every factor combination once, in
    row-major order of the listed factors. Rendering is a pure function of
    (spec, seed); the seed is recorded for provenance but the renderer
    itself draws no random numbers.
    """
    factors = spec.get("factors", [])
    if not 1 <= len(factors) <= len(PROCEDURAL_FACTORS):
        raise ValueError(
            f"spec must list 1-{len(PROCEDURAL_FACTORS)} factors"
        )
    names = [f["name"] for f in factors]
    sizes = [int(f["size"]) for f in factors]
    for name in names:
        if name not in PROCEDURAL_FACTORS:
            raise ValueError(
                f"unknown factor {name!r}; supported: {PROCEDURAL_FACTORS}"
            )
    if len(set(names)) != len(names):
        raise ValueError("duplicate factor names")
    if any(s < 1 for s in sizes):
        raise ValueError("factor sizes must be positive")
    n = int(np.prod(sizes))
    if n > grid_cap:
        raise ValueError(f"factor grid of {n} images exceeds cap {grid_cap}")
    image_size = int(spec.get("image_size", 64))

    def levels(name: str, size: int) -> np.ndarray:
        lo, hi = {
            # center positions and half-sides in pixels, intensity in uint8
            "x": (0.22 * image_size, 0.78 * image_size),
            "y": (0.22 * image_size, 0.78 * image_size),
            "scale": (0.06 * image_size, 0.20 * image_size),
            "intensity": (96.0, 255.0),
        }[name]
        if size == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, size)

    defaults = {
        "x": image_size / 2.0,
        "y": image_size / 2.0,
        "scale": 0.14 * image_size,
        "intensity": 255.0,
    }
    level_table = {nm: levels(nm, sz) for nm, sz in zip(names, sizes)}
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    factor_values = np.stack([g.reshape(-1) for g in grids], axis=1)

    images = np.zeros((n, 1, image_size, image_size), dtype=np.uint8)
    for idx, row in enumerate(factor_values):
        setting = dict(defaults)
        for nm, level_idx in zip(names, row):
            setting[nm] = level_table[nm][level_idx]
        _render_square(
            images[idx, 0],
            cx=setting["x"],
            cy=setting["y"],
            half=setting["scale"],
            value=int(round(setting["intensity"])),
        )
    return FactorDataset(
        images_u8=images,
        factor_sizes=tuple(sizes),
        factor_values=factor_values.astype(np.int64),
    )


def sample_batch(
    dataset: FactorDataset, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform-with-replacement image batch, float32 (B, C, H, W)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return dataset.images_at(idx)


def fix_factor_batch(
    dataset: FactorDataset,
    factor_index: int,
    rng: np.random.Generator,
    batch_size: int,
) -> tuple[np.ndarray, int]:
    """Batch sharing one random value of the chosen factor.

    Other factors are sampled uniformly. Returns (images, fixed_value).
    """
    if dataset.factor_sizes is None:
        raise NotImplementedError("dataset has no factor metadata")
    f = dataset.num_factors
    if not 0 <= factor_index < f:
        raise ValueError(f"factor index {factor_index} out of range")
    sizes = dataset.factor_sizes
    fixed_value = int(rng.integers(0, sizes[factor_index]))
    values = np.empty((batch_size, f), dtype=np.int64)
    for j, size in enumerate(sizes):
        values[:, j] = rng.integers(0, size, size=batch_size)
    values[:, factor_index] = fixed_value
    idx = dataset.index_of_factors(values)
    return dataset.images_at(idx), fixed_value
