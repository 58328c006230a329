"""Prediction confidence signals: probabilities, pseudo labels, patch rankings.

These are the quantities the adaptive mixer consumes: per-pixel class
probabilities, argmax pseudo labels with their confidence (max probability),
and patch-level confidence scores ranked over a regular grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities, stabilized by max-subtraction.

    Accepts (C, H, W) or (B, C, H, W); the channel axis is normalized.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    channel_axis = 0 if logits.dim() == 3 else 1
    shifted = logits - logits.amax(dim=channel_axis, keepdim=True)
    expd = shifted.exp()
    return expd / expd.sum(dim=channel_axis, keepdim=True)


def pseudo_label(probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Argmax label map and its per-pixel confidence (the max probability).

    Ties resolve to the lowest class index.  Input (C, H, W); returns
    (labels (H, W) int64, confidence (H, W)).
    """
    if probs.dim() != 3:
        raise ValueError(f"expected (C, H, W) probabilities, got shape "
                         f"{tuple(probs.shape)}")
    confidence, labels = probs.max(dim=0)
    # Guarantee the lowest-index winner regardless of backend tie behavior.
    lowest = (probs == confidence.unsqueeze(0)).to(torch.uint8).argmax(dim=0)
    return lowest.to(torch.int64), confidence


@dataclass(frozen=True)
class PatchGrid:
    """Regular tiling of an image into square patches, indexed row-major."""

    patch_size: int
    rows: int
    cols: int

    @classmethod
    def from_shape(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size <= 0:
            raise ValueError(f"patch size must be positive, got {patch_size}")
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"patch size {patch_size} does not tile a {height}x{width} image")
        return cls(patch_size=patch_size, rows=height // patch_size,
                   cols=width // patch_size)

    @property
    def total(self) -> int:
        return self.rows * self.cols

    def rect(self, index: int) -> tuple[int, int, int, int]:
        """Pixel rectangle (row0, row1, col0, col1) of patch ``index``."""
        if not 0 <= index < self.total:
            raise IndexError(f"patch index {index} out of range 0..{self.total - 1}")
        r, c = divmod(index, self.cols)
        s = self.patch_size
        return r * s, (r + 1) * s, c * s, (c + 1) * s


def patch_scores(conf: torch.Tensor, grid: PatchGrid) -> list[float]:
    """Mean confidence inside each grid patch, in patch-index order."""
    if conf.dim() != 2:
        raise ValueError(f"expected a 2D confidence map, got shape "
                         f"{tuple(conf.shape)}")
    h, w = conf.shape
    s = grid.patch_size
    if grid.rows * s != h or grid.cols * s != w:
        raise ValueError(
            f"grid {grid.rows}x{grid.cols} (patch {s}) does not match a "
            f"{h}x{w} map")
    means = conf.reshape(grid.rows, s, grid.cols, s).mean(dim=(1, 3))
    return [float(v) for v in means.reshape(-1)]


@dataclass(frozen=True)
class PatchRanking:
    """Patches ordered by score; ties broken by ascending patch index."""

    entries: tuple[tuple[int, float], ...]
    mode: str

    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]

    def top(self, n: int) -> list[int]:
        return [i for i, _ in self.entries[:n]]


def rank_patches(scores: list[float], mode: str) -> PatchRanking:
    """Stable ordering of patch indices by score.

    ``highest_first`` sorts descending, ``lowest_first`` ascending; equal
    scores keep ascending index order in both modes.
    """
    if mode not in ("highest_first", "lowest_first"):
        raise ValueError(f"unknown ranking mode {mode!r}")
    if len(scores) == 0:
        raise ValueError("cannot rank an empty score list")
    indexed = list(enumerate(scores))
    reverse = mode == "highest_first"
    # sorted() is stable, so equal scores retain ascending patch index.
    ordered = sorted(indexed, key=lambda item: -item[1] if reverse else item[1])
    return PatchRanking(entries=tuple((i, float(s)) for i, s in ordered),
                        mode=mode)
