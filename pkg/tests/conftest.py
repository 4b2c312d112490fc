"""Shared fixtures: analytic oracle generators and a tiny model bundle."""

from __future__ import annotations

import numpy as np
import pytest

from dismask.netcore import ArchConfig, ModelBundle


class BlockGenerator:
    """Analytic 2-code generator with exactly known traversal lengths.

    Renders a 16x16 single-channel image whose left half equals the first
    (internal) factor and whose right half equals the second. An optional
    rotation mixes the incoming codes before rendering, so a traversal along
    one code axis moves both factors by (cos a, sin a) per unit step. Under
    the mean-absolute pixel distance a step of size s along code axis 0
    therefore costs exactly s * (|cos a| + |sin a|) / 2.
    """

    d = 2

    def __init__(self, angle_deg: float = 0.0, size: int = 16):
        self.size = size
        rad = np.deg2rad(angle_deg)
        self.rot = np.array(
            [[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]]
        )

    def __call__(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.float64)
        u = codes @ self.rot.T
        n, s = len(codes), self.size
        imgs = np.empty((n, 1, s, s), dtype=np.float64)
        imgs[:, :, :, : s // 2] = u[:, 0, None, None, None]
        imgs[:, :, :, s // 2 :] = u[:, 1, None, None, None]
        return imgs


class ConstantGenerator:
    """Ignores its codes entirely; every traversal has zero length."""

    def __init__(self, d: int = 4, size: int = 16):
        self.d = d
        self.size = size

    def __call__(self, codes: np.ndarray) -> np.ndarray:
        return np.zeros((len(codes), 1, self.size, self.size))


class LookupEncoder:
    """Recovers ground-truth factors by exact image lookup, then permutes
    them into latent dimensions; remaining dimensions stay constant."""

    def __init__(self, dataset, perm, d=6):
        self.d = d
        self.perm = perm
        self.table = {
            dataset.images_u8[i].tobytes(): dataset.factor_values[i]
            for i in range(len(dataset))
        }

    def __call__(self, images):
        u8 = np.round((np.asarray(images) + 1.0) * 127.5).astype(np.uint8)
        codes = np.zeros((len(images), self.d))
        for i in range(len(images)):
            row = self.table[u8[i].tobytes()]
            for f, value in enumerate(row):
                codes[i, self.perm[f]] = float(value)
        return codes


class NoiseEncoder:
    """Ignores its input; every code is fresh standard-normal noise."""

    def __init__(self, d=6, seed=0):
        self.d = d
        self.rng = np.random.default_rng(seed)

    def __call__(self, images):
        return self.rng.standard_normal((len(images), self.d))


TINY_ARCH = dict(
    d=3,
    num_rects=2,
    resolution=16,
    img_channels=1,
    base_channels=6,
    stage_channels=(4, 3),
)


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig(**TINY_ARCH)


@pytest.fixture
def tiny_bundle(tiny_arch) -> ModelBundle:
    return ModelBundle.build(tiny_arch, seed=7)


@pytest.fixture
def block_generator() -> BlockGenerator:
    return BlockGenerator()
