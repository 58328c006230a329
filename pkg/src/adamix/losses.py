"""Segmentation losses: cross-entropy + soft Dice, with optional pixel masks.

The combined loss is 0.5 * CE + 0.5 * (1 - soft Dice).  CE is the per-pixel
mean negative log-likelihood; soft Dice is macro-averaged over all classes
with squared-probability denominators and an additive smoothing term.  Both
terms restrict to an optional binary pixel mask, and an all-zero mask yields
a loss of exactly 0.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-6


def _validate(logits: torch.Tensor, target: torch.Tensor,
              pixel_mask: torch.Tensor | None) -> None:
    if logits.dim() != 3:
        raise ValueError(f"expected (C, H, W) logits, got {tuple(logits.shape)}")
    if target.shape != logits.shape[1:]:
        raise ValueError(
            f"target shape {tuple(target.shape)} does not match logits "
            f"spatial shape {tuple(logits.shape[1:])}")
    if pixel_mask is not None and pixel_mask.shape != target.shape:
        raise ValueError(
            f"pixel mask shape {tuple(pixel_mask.shape)} does not match "
            f"target shape {tuple(target.shape)}")


def cross_entropy(logits: torch.Tensor, target: torch.Tensor,
                  pixel_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over the masked pixels."""
    _validate(logits, target, pixel_mask)
    log_probs = F.log_softmax(logits, dim=0)
    nll = -log_probs.gather(0, target.unsqueeze(0)).squeeze(0)
    if pixel_mask is None:
        return nll.mean()
    mask = pixel_mask.to(nll.dtype)
    count = mask.sum()
    if count.item() == 0:
        return torch.zeros((), dtype=logits.dtype)
    return (nll * mask).sum() / count


def soft_dice(logits: torch.Tensor, target: torch.Tensor,
              pixel_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Soft Dice overlap, macro-averaged over every class channel.

    Per class: (2 * sum(p*g) + s) / (sum(p^2) + sum(g^2) + s) over the masked
    pixels, where p is the softmax probability and g the one-hot target.
    """
    _validate(logits, target, pixel_mask)
    num_classes = logits.shape[0]
    probs = F.softmax(logits, dim=0)
    onehot = F.one_hot(target, num_classes).permute(2, 0, 1).to(probs.dtype)
    if pixel_mask is not None:
        mask = pixel_mask.to(probs.dtype).unsqueeze(0)
        probs = probs * mask
        onehot = onehot * mask
    intersect = (probs * onehot).sum(dim=(1, 2))
    denom = (probs * probs).sum(dim=(1, 2)) + (onehot * onehot).sum(dim=(1, 2))
    per_class = (2.0 * intersect + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return per_class.mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor,
             pixel_mask: torch.Tensor | None = None) -> torch.Tensor:
    """0.5 * cross-entropy + 0.5 * (1 - soft Dice) over the masked pixels."""
    _validate(logits, target, pixel_mask)
    if pixel_mask is not None and float(pixel_mask.sum()) == 0:
        return torch.zeros((), dtype=logits.dtype)
    ce = cross_entropy(logits, target, pixel_mask)
    dice = soft_dice(logits, target, pixel_mask)
    return 0.5 * ce + 0.5 * (1.0 - dice)


def unsup_loss(logits: torch.Tensor, pseudo: torch.Tensor,
               conf: torch.Tensor, tau: float) -> torch.Tensor:
    """Segmentation loss against pseudo labels, restricted to confident pixels.

    Only pixels whose confidence is >= tau contribute; if none qualify the
    loss is exactly 0.
    """
    if conf.shape != pseudo.shape:
        raise ValueError(
            f"confidence shape {tuple(conf.shape)} does not match pseudo "
            f"label shape {tuple(pseudo.shape)}")
    keep = (conf >= tau).to(logits.dtype)
    return seg_loss(logits, pseudo, keep)
