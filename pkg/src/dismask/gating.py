"""Differentiable structured-gating primitives.

Soft monotone step gates built from the cumulative sum of a softmax,
band-pass gates with a learnable interval, rectangular spatial masks from
outer products of gates, and their aggregation. Also provides the separable
softmax mask used as an ablation variant.

All functions are pure and operate on the last dimension(s) of their input
tensors, so arbitrary leading batch dimensions are supported.
"""

from __future__ import annotations

import torch


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} must be finite")


def cumax(logits: torch.Tensor) -> torch.Tensor:
    """Cumulative sum of the softmax of ``logits`` along the last dim.

    Produces a soft monotone step gate: entries are non-decreasing in
    [0, 1] and the final entry equals 1 up to float tolerance.
    """
    if logits.shape[-1] < 1:
        raise ValueError("cumax requires length >= 1")
    _check_finite("cumax logits", logits)
    # torch.softmax subtracts the max internally, so saturated logits are safe
    return torch.cumsum(torch.softmax(logits, dim=-1), dim=-1)


def band_pass_gate(logits_lo: torch.Tensor, logits_hi: torch.Tensor) -> torch.Tensor:
    """Soft interval indicator: ``cumax(lo) * (1 - cumax(hi))``.

    The two cumax factors place the rising and falling edges independently,
    so the product is a band-pass-shaped gate with entries in [0, 1].
    """
    if logits_lo.shape != logits_hi.shape:
        raise ValueError(
            f"gate logits shape mismatch: {tuple(logits_lo.shape)} vs "
            f"{tuple(logits_hi.shape)}"
        )
    # cumax may overshoot 1 by a float ulp, which would leak tiny negative
    # values through (1 - cumax); clamp to keep the gate a true indicator.
    return (cumax(logits_lo) * (1.0 - cumax(logits_hi))).clamp(0.0, 1.0)


def rect_mask(gate_h: torch.Tensor, gate_w: torch.Tensor) -> torch.Tensor:
    """Outer product of a height gate and a width gate.

    Returns a soft rectangle: ``mask[i, j] = gate_h[i] * gate_w[j]``.
    """
    _check_finite("gate_h", gate_h)
    _check_finite("gate_w", gate_w)
    return gate_h.unsqueeze(-1) * gate_w.unsqueeze(-2)


def aggregate_masks(rects: list[torch.Tensor]) -> torch.Tensor:
    """Mean of a list of single-rectangle masks of identical shape."""
    if len(rects) == 0:
        raise ValueError("aggregate_masks requires at least one rectangle")
    shape = rects[0].shape
    for r in rects[1:]:
        if r.shape != shape:
            raise ValueError("all rectangles must share one shape")
    return torch.stack(rects, dim=0).mean(dim=0)


def softmax_mask(logits_h: torch.Tensor, logits_w: torch.Tensor) -> torch.Tensor:
    """Ablation mask: outer product of row/column softmaxes.

    The outer product of two softmaxes sums to 1, which concentrates mass in
    point-like humps; it is renormalized so the maximum entry is 1 to keep
    the downstream feature blend in range.
    """
    _check_finite("logits_h", logits_h)
    _check_finite("logits_w", logits_w)
    m = torch.softmax(logits_h, dim=-1).unsqueeze(-1) * torch.softmax(
        logits_w, dim=-1
    ).unsqueeze(-2)
    peak = m.amax(dim=(-2, -1), keepdim=True)
    return m / peak
