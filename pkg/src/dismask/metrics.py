"""Traversal metrics, perceptual distances, and model ranking.

Generators are callables mapping latent codes (B, d) to images
(B, C, H, W) with a ``d`` attribute; encoders map images to codes. The
adapters at the bottom wrap a model bundle into these interfaces.

All accumulations run in float64 with a fixed (sequential) reduction order
so results are independent of any internal batching.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import stats
from torch import nn

from . import checkpoint

DISTANCE_BACKENDS = ("pixel_l1", "pixel_l2", "random_features", "learned_features")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")


class PixelL1:
    """Mean absolute pixel difference."""

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_pair(a, b)
        diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
        return diff.mean(axis=tuple(range(1, a.ndim)))


class PixelL2:
    """Root-mean-square pixel difference."""

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_pair(a, b)
        diff = (a.astype(np.float64) - b.astype(np.float64)) ** 2
        return np.sqrt(diff.mean(axis=tuple(range(1, a.ndim))))


class _FeatureNet(nn.Module):
    """Small fixed conv stack; distances are L2 in its feature space."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, 8, 3, stride=2, padding=1),
                nn.Conv2d(8, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 16, 3, stride=2, padding=1),
            ]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = torch.tanh(conv(x))
        return x.flatten(1)


class FeatureDistance:
    """L2 distance between features of a fixed conv stack.

    With ``weights_path=None`` the stack is untrained, initialized from
    ``seed``; otherwise the weights load from a checkpoint-format directory
    whose parameter names are ``features/<torch name>``.
    """

    def __init__(self, seed: int = 0, weights_path: str | None = None):
        self.seed = seed
        self.weights_path = weights_path
        self._net: _FeatureNet | None = None

    def _build(self, in_channels: int) -> _FeatureNet:
        net = _FeatureNet(in_channels)
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for p in net.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.3)
        if self.weights_path is not None:
            manifest = checkpoint.read_manifest(self.weights_path)
            named = dict(net.named_parameters())
            with torch.no_grad():
                for key, meta in manifest["params"].items():
                    prefix, _, name = key.partition("/")
                    if prefix != "features" or name not in named:
                        raise ValueError(f"unexpected feature weight {key!r}")
                    named[name].copy_(
                        checkpoint._read_f32(
                            Path(self.weights_path) / meta["file"],
                            meta["shape"],
                        )
                    )
        return net

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_pair(a, b)
        if self._net is None:
            self._net = self._build(a.shape[1])
        with torch.no_grad():
            fa = self._net(torch.as_tensor(np.asarray(a, dtype=np.float32)))
            fb = self._net(torch.as_tensor(np.asarray(b, dtype=np.float32)))
        gap = (fa.double() - fb.double()).numpy()
        return np.sqrt((gap ** 2).sum(axis=1))


def random_features_distance(a: np.ndarray, b: np.ndarray, seed: int = 0) -> float:
    """Distance between two single images under a seeded feature stack."""
    return float(FeatureDistance(seed=seed)(a[None], b[None])[0])


def make_distance(name: str, seed: int = 0, weights_path: str | None = None):
    if name == "pixel_l1":
        return PixelL1()
    if name == "pixel_l2":
        return PixelL2()
    if name == "random_features":
        return FeatureDistance(seed=seed)
    if name == "learned_features":
        if weights_path is None:
            raise ValueError("learned_features requires a weights path")
        return FeatureDistance(seed=seed, weights_path=weights_path)
    raise ValueError(f"unknown distance backend {name!r}")


@dataclass
class TplReport:
    tpl_per_dim: np.ndarray
    active: np.ndarray
    tpl_total: float
    threshold: float
    segments: int
    num_base_samples: int

    @property
    def num_active(self) -> int:
        return int(self.active.sum())

    def to_dict(self) -> dict:
        return {
            "tpl_per_dim": [float(v) for v in self.tpl_per_dim],
            "active": [bool(v) for v in self.active],
            "tpl_total": float(self.tpl_total),
            "threshold": self.threshold,
            "segments": self.segments,
            "num_base_samples": self.num_base_samples,
        }


def _chunked(generator, codes: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = [generator(codes[i : i + chunk]) for i in range(0, len(codes), chunk)]
    return np.concatenate(outs, axis=0)


def traversal_starts(n_segments: int) -> np.ndarray:
    """N left endpoints of the traversal over (-4, 4), step 8/N."""
    return -4.0 + (8.0 / n_segments) * np.arange(n_segments)


def tpl_dim(
    generator,
    i: int,
    dist,
    n_segments: int = 50,
    num_base: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Accumulated perceptual distance along axis ``i``.

    Monte Carlo average over ``num_base`` prior samples of the other
    dimensions, each traversed through N segments of length 8/N over
    (-4, 4).
    """
    if n_segments < 2:
        raise ValueError("need at least 2 segments")
    rng = rng or np.random.default_rng(0)
    d = generator.d
    base = rng.standard_normal((num_base, d))
    starts = traversal_starts(n_segments)
    step = 8.0 / n_segments
    lo = np.repeat(base, n_segments, axis=0)
    lo[:, i] = np.tile(starts, num_base)
    hi = lo.copy()
    hi[:, i] += step
    dvals = dist(_chunked(generator, lo), _chunked(generator, hi))
    per_base = dvals.reshape(num_base, n_segments).sum(axis=1)
    return float(per_base.mean())


def tpl_total(
    generator,
    dist,
    n_segments: int = 50,
    threshold: float = 0.01,
    num_base: int = 16,
    rng: np.random.Generator | None = None,
) -> TplReport:
    """Per-dimension traversal lengths gated by the activity threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    rng = rng or np.random.default_rng(0)
    per_dim = np.array(
        [
            tpl_dim(generator, i, dist, n_segments, num_base, rng)
            for i in range(generator.d)
        ]
    )
    active = per_dim >= threshold
    return TplReport(
        tpl_per_dim=per_dim,
        active=active,
        tpl_total=float(per_dim[active].sum()),
        threshold=threshold,
        segments=n_segments,
        num_base_samples=num_base,
    )


def dis_cum_sweep(
    generator,
    dims: tuple[int, int],
    dist,
    n_segments: int,
    alphas_deg,
) -> list[tuple[float, float]]:
    """Accumulated distance over a rotated 2-D latent grid, per angle.

    For each rotation angle the N x N grid over (-4, 4) in the plane of
    ``dims`` is traversed one step of 8/N along the first (rotated) axis;
    all other dimensions stay at 0.
    """
    i, j = dims
    if i == j:
        raise ValueError("the two traversal dims must be distinct")
    if n_segments < 2:
        raise ValueError("need at least 2 segments")
    d = generator.d
    starts = traversal_starts(n_segments)
    c1, c2 = np.meshgrid(starts, starts, indexing="ij")
    pts = np.stack([c1.reshape(-1), c2.reshape(-1)], axis=0)  # (2, N*N)
    step = np.array([[8.0 / n_segments], [0.0]])
    curve = []
    for alpha in alphas_deg:
        rad = np.deg2rad(alpha)
        rot = np.array(
            [[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]]
        )
        lo2 = rot @ pts
        hi2 = rot @ (pts + step)
        lo = np.zeros((pts.shape[1], d))
        hi = np.zeros((pts.shape[1], d))
        lo[:, i], lo[:, j] = lo2[0], lo2[1]
        hi[:, i], hi[:, j] = hi2[0], hi2[1]
        dvals = dist(_chunked(generator, lo), _chunked(generator, hi))
        curve.append((float(alpha), float(dvals.sum())))
    return curve


def ppl(
    generator,
    dist,
    num_pairs: int = 256,
    epsilon: float = 1e-2,
    rng: np.random.Generator | None = None,
) -> float:
    """Perceptual path length along random latent interpolations."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    rng = rng or np.random.default_rng(0)
    d = generator.d
    a = rng.standard_normal((num_pairs, d))
    b = rng.standard_normal((num_pairs, d))
    t = rng.uniform(0.0, 1.0, size=(num_pairs, 1))
    e0 = a + (b - a) * t
    e1 = a + (b - a) * (t + epsilon)
    dvals = dist(_chunked(generator, e0), _chunked(generator, e1))
    return float((dvals / epsilon ** 2).mean())


def factorvae_metric(
    encoder,
    dataset,
    train_votes: int = 800,
    eval_votes: int = 200,
    batch: int = 64,
    rng: np.random.Generator | None = None,
    collapse_rel_var: float = 1e-4,
) -> float:
    """Majority-vote factor classification accuracy in [0, 1].

    Per vote one random factor is fixed, the batch is encoded, per-dim code
    variances are normalized by global variances, and the least-variance
    non-collapsed dimension votes for the factor. Accuracy is measured on
    held-out votes with the majority-vote table from the training votes.
    """
    from . import data as data_mod

    if dataset.factor_sizes is None:
        raise NotImplementedError("dataset has no factor metadata")
    rng = rng or np.random.default_rng(0)
    num_factors = dataset.num_factors

    probe = encoder(data_mod.sample_batch(dataset, max(256, 4 * batch), rng))
    global_var = probe.astype(np.float64).var(axis=0)
    active = global_var >= collapse_rel_var * global_var.max()
    if not active.any():
        return 0.0
    active_idx = np.flatnonzero(active)

    def vote(num: int) -> np.ndarray:
        rows = np.empty((num, 2), dtype=np.int64)
        for v in range(num):
            f = int(rng.integers(0, num_factors))
            images, _ = data_mod.fix_factor_batch(dataset, f, rng, batch)
            codes = encoder(images).astype(np.float64)
            local = codes.var(axis=0)[active_idx] / global_var[active_idx]
            rows[v] = (active_idx[int(np.argmin(local))], f)
        return rows

    d = probe.shape[1]
    table = np.zeros((d, num_factors), dtype=np.int64)
    for dim, f in vote(train_votes):
        table[dim, f] += 1
    classifier = table.argmax(axis=1)
    eval_rows = vote(eval_votes)
    correct = classifier[eval_rows[:, 0]] == eval_rows[:, 1]
    return float(correct.mean())


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    if len(xs) < 2:
        raise ValueError("need at least 2 points")
    return float(stats.spearmanr(xs, ys).statistic)


def rank_generators(
    named_generators,
    dist,
    n_segments: int = 50,
    threshold: float = 0.01,
    min_active: int = 0,
    num_base: int = 16,
    seed: int = 0,
) -> list[dict]:
    """Rank (name, generator) pairs ascending by total traversal length.

    Lower is better. Generators whose active-dimension count is <=
    ``min_active`` are excluded from the ranking (status ``filtered``);
    generators given as exceptions are listed with status ``error``.
    """
    rows = []
    for name, generator in named_generators:
        row: dict = {"model_dir": str(name)}
        if isinstance(generator, Exception):
            row.update({"status": "error", "error": str(generator)})
            rows.append(row)
            continue
        report = tpl_total(
            generator,
            dist,
            n_segments=n_segments,
            threshold=threshold,
            num_base=num_base,
            rng=np.random.default_rng(seed),
        )
        row.update(
            {
                "tpl_total": report.tpl_total,
                "num_active": report.num_active,
                "tpl_per_dim": [float(v) for v in report.tpl_per_dim],
                "status": "ok" if report.num_active > min_active else "filtered",
            }
        )
        rows.append(row)
    ranked = sorted(
        (r for r in rows if r["status"] == "ok"), key=lambda r: r["tpl_total"]
    )
    rest = [r for r in rows if r["status"] != "ok"]
    for rank, row in enumerate(ranked, start=1):
        row["rank"] = rank
    return ranked + rest


def rank_models(
    checkpoint_dirs,
    dist,
    n_segments: int = 50,
    threshold: float = 0.01,
    min_active: int = 0,
    num_base: int = 16,
    seed: int = 0,
) -> list[dict]:
    """Rank checkpoint directories ascending by total traversal length.

    Unloadable checkpoints are listed with status ``error`` and excluded.
    """
    named = []
    for directory in checkpoint_dirs:
        try:
            bundle, _ = checkpoint.load_bundle(directory)
            named.append((directory, bundle_generator(bundle)))
        except Exception as exc:  # noqa: BLE001 - reported per model
            named.append((directory, exc))
    return rank_generators(
        named,
        dist,
        n_segments=n_segments,
        threshold=threshold,
        min_active=min_active,
        num_base=num_base,
        seed=seed,
    )


class bundle_generator:
    """Wrap a model bundle as a metrics-facing generator callable."""

    def __init__(self, bundle):
        self.bundle = bundle
        self.d = bundle.arch.d

    def __call__(self, codes: np.ndarray) -> np.ndarray:
        from . import netcore

        return netcore.generate(self.bundle, codes)


class bundle_encoder:
    """Wrap a model bundle's recognizer as an encoder callable."""

    def __init__(self, bundle):
        self.bundle = bundle
        self.d = bundle.arch.d

    def __call__(self, images: np.ndarray) -> np.ndarray:
        from . import netcore

        outs = []
        for i in range(0, len(images), 256):
            outs.append(netcore.recognize(self.bundle, images[i : i + 256]))
        return np.concatenate(outs, axis=0)
