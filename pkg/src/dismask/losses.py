"""Training objectives.

Non-saturating adversarial losses, the plain code-regression loss used by
the mutual-information baseline, and the perturbed-dimension reconstruction
loss that scores shared dimensions on the mean of the two reconstructions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class PerturbationSample:
    """Record of one latent perturbation: dimension, offset(s), variance."""

    k: int
    p: torch.Tensor
    p_var: float


class SequentialKSchedule:
    """Cycles the perturbed dimension, advancing every ``window`` images."""

    def __init__(self, d: int, window: int = 1000):
        if d < 1 or window < 1:
            raise ValueError("d and window must be positive")
        self.d = d
        self.window = window

    def k_for(self, images_seen: int) -> int:
        return (images_seen // self.window) % self.d


def gan_losses(
    real_logits: torch.Tensor, fake_logits: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating cross-entropy losses for the minimax game.

    The discriminator minimizes -log D(x) - log(1 - D(G(z))); the generator
    minimizes -log D(G(z)). Both are mean-reduced over the batch.
    """
    loss_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    loss_g = F.softplus(-fake_logits).mean()
    return loss_d, loss_g


def info_mse_loss(c_true: torch.Tensor, c_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and reconstructed codes.

    Serves as the variational surrogate for maximizing the mutual
    information between codes and generated images in the baseline mode.
    """
    if c_true.shape != c_hat.shape:
        raise ValueError(
            f"code shape mismatch: {tuple(c_true.shape)} vs {tuple(c_hat.shape)}"
        )
    return ((c_hat - c_true) ** 2).mean()


def ps_loss(
    c: torch.Tensor,
    c_prime: torch.Tensor,
    c_hat: torch.Tensor,
    c_hat_prime: torch.Tensor,
    k: int,
) -> torch.Tensor:
    """Dimension-wise reconstruction loss with fuzzy shared-dimension scoring.

    On the perturbed dimension k both reconstructions must match their own
    targets; on every other dimension only the mean of the two
    reconstructions must match the (shared) truth:

        loss_i = (c_hat_i - c_i)^2 + (c_hat'_i - c'_i)^2          if i == k
        loss_i = 2 * ((c_hat_i + c_hat'_i) / 2 - c_i)^2           otherwise

    The result is the mean of loss_i over dimensions (and over the batch
    for 2-D inputs). Inputs may be (d,) vectors or (B, d) batches.
    """
    if not (c.shape == c_prime.shape == c_hat.shape == c_hat_prime.shape):
        raise ValueError("all code tensors must share one shape")
    d = c.shape[-1]
    if not 0 <= k < d:
        raise ValueError(f"perturbed dimension {k} out of range for d={d}")
    shared = torch.ones(d, dtype=torch.bool, device=c.device)
    shared[k] = False
    if not torch.equal(c[..., shared], c_prime[..., shared]):
        raise ValueError("c and c_prime may differ only on dimension k")
    loss_k = (c_hat[..., k] - c[..., k]) ** 2 + (
        c_hat_prime[..., k] - c_prime[..., k]
    ) ** 2
    mean_hat = (c_hat[..., shared] + c_hat_prime[..., shared]) / 2.0
    loss_shared = 2.0 * (mean_hat - c[..., shared]) ** 2
    total = loss_k + loss_shared.sum(dim=-1)
    return (total / d).mean()


def sample_perturbation(
    c: torch.Tensor,
    rng: torch.Generator,
    p_var: float,
    schedule_state=None,
    images_seen: int = 0,
) -> tuple[torch.Tensor, PerturbationSample]:
    """Perturb one latent dimension of ``c`` with zero-mean Gaussian noise.

    The dimension is drawn uniformly when ``schedule_state`` is None,
    otherwise taken from the sequential schedule at ``images_seen``. The
    offset has variance ``p_var`` (std = sqrt(p_var)); all other dimensions
    are copied. ``c`` may be (d,) or (B, d); batched input shares one k with
    an independent offset per row.
    """
    if p_var <= 0:
        raise ValueError("p_var must be positive")
    d = c.shape[-1]
    if schedule_state is None:
        k = int(torch.randint(0, d, (1,), generator=rng).item())
    else:
        k = schedule_state.k_for(images_seen)
    lead = c.shape[:-1]
    p = torch.randn(lead, generator=rng, dtype=c.dtype) * (p_var ** 0.5)
    c_prime = c.clone()
    c_prime[..., k] = c_prime[..., k] + p
    return c_prime, PerturbationSample(k=k, p=p, p_var=p_var)


def total_loss(
    loss_gan: torch.Tensor, loss_ps: torch.Tensor, lam: float
) -> torch.Tensor:
    """Weighted sum loss_gan + lam * loss_ps."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return loss_gan + lam * loss_ps
