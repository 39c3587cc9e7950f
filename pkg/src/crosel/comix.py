"""Co-mix consistency regularization.

Weak views are trained towards sharpened predictions on their strong views and
vice versa, with pseudo labels restricted to the candidate set. The two pools
are concatenated, shuffled into pairs and mixed with MixUp (``lam' >= 0.5`` so
each mixed item stays closest to its first member).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError


@dataclass(frozen=True)
class MixedBatch:
    features: torch.Tensor
    targets: torch.Tensor
    lam: torch.Tensor  # lam' per item, in [0.5, 1]
    perm: np.ndarray


@torch.no_grad()
def pseudo_label(logits: torch.Tensor, candidates, temperature: float) -> torch.Tensor:
    """Temperature softmax over the candidate labels; zero elsewhere.

    ``exp(f_j / T) / sum_{l in S} exp(f_l / T)``. Works on a single logit
    vector or a batch of rows. The result is detached.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = torch.as_tensor(logits).detach()
    mask = torch.as_tensor(candidates, dtype=torch.bool, device=logits.device)
    if mask.shape != logits.shape:
        raise ValueError(f"candidate mask {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
    if not mask.any(dim=-1).all():
        raise ValueError("empty candidate set")
    scaled = (logits / temperature).masked_fill(~mask, float("-inf"))
    probs = torch.softmax(scaled, dim=-1)
    if not torch.isfinite(probs).all():
        raise NumericError("pseudo label is not finite")
    return probs


def mix(x1, p1, x2, p2, lam):
    """MixUp with ``lam' = max(lam, 1 - lam)``; ``lam`` broadcasts over rows."""
    lam = torch.as_tensor(lam, dtype=x1.dtype)
    lam = torch.maximum(lam, 1 - lam)
    lx = lam.reshape(-1, *([1] * (x1.dim() - 1))) if lam.dim() else lam
    lp = lam.reshape(-1, 1) if lam.dim() else lam
    return lx * x1 + (1 - lx) * x2, lp * p1 + (1 - lp) * p2, lam


def mixup_pair(a, b, alpha: float, rng: np.random.Generator):
    """Mix one ``(x, p)`` pair with ``lam ~ Beta(alpha, alpha)``.

    Returns ``(x', p', lam')``.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    (x1, p1), (x2, p2) = a, b
    lam = float(rng.beta(alpha, alpha))
    x, p, lam = mix(torch.as_tensor(x1), torch.as_tensor(p1), torch.as_tensor(x2), torch.as_tensor(p2), lam)
    return x, p, float(lam)


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def comix_loss(model, x_weak, x_strong, candidates, temperature: float, alpha: float, rng: np.random.Generator):
    """Consistency loss over ``2n`` mixed items built from an ``n``-example batch.

    ``x_weak``/``x_strong`` are the two augmented views of the same examples,
    ``candidates`` the matching ``(n, k)`` boolean mask. Pseudo labels come from
    a gradient-free pass through ``model``; gradient flows only through the
    forward pass on the mixed inputs. Returns ``(loss, MixedBatch)``.
    """
    x_weak = torch.as_tensor(x_weak)
    x_strong = torch.as_tensor(x_strong)
    mask = torch.as_tensor(candidates, dtype=torch.bool)
    n = len(x_weak)
    with torch.no_grad():
        logits = model(torch.cat([x_weak, x_strong]))
    p_weak = pseudo_label(logits[:n], mask, temperature)
    p_strong = pseudo_label(logits[n:], mask, temperature)

    # weak views target strong-pass labels and vice versa
    xs = torch.cat([x_weak, x_strong])
    ps = torch.cat([p_strong, p_weak])
    perm = rng.permutation(2 * n)
    lam = torch.from_numpy(rng.beta(alpha, alpha, size=2 * n)).to(xs.dtype)
    x_mix, p_mix, lam = mix(xs, ps, xs[perm], ps[perm], lam)
    loss = soft_cross_entropy(model(x_mix), p_mix)
    return loss, MixedBatch(x_mix, p_mix, lam, perm)
