"""Patch-transplant mixers producing perturbed samples from sample pairs.

All four strategies share one paste kernel (``transplant``) that copies whole
grid patches -- image, label, and confidence content together -- from an
auxiliary sample into a copy of the original:

* ``cutmix``   -- n random patch positions, position-preserving;
* ``umix``     -- the original's n lowest-confidence patches receive the
                  auxiliary's n highest-confidence patches;
* ``iumix``    -- the mirror: highest-confidence patches receive
                  lowest-confidence content;
* ``adamix``   -- picks direction and patch count adaptively from the
                  self-paced solvers, interpolating between the two fixed
                  strategies as training progresses.

Every mixer returns a ``MixedSample`` carrying the executed ``MixPlan`` so
provenance can be audited pixel by pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .confidence import (PatchGrid, patch_scores, pseudo_label, rank_patches,
                         softmax_probs)
from .selfpaced import (HIGH_FROM_LOW, LOW_FROM_HIGH, AgeSchedule,
                        SelfPacedState, age_lambda, mix_rule, proxy_loss,
                        solve_state)

Triple = tuple[torch.Tensor, torch.Tensor, torch.Tensor]

STRATEGIES = ("cutmix", "umix", "iumix", "adamix")


@dataclass(frozen=True)
class MixPlan:
    """The executed mixing decision: which patches moved where, and why."""

    strategy: str
    rule: str                       # L_from_H, H_from_L, or random
    n: int
    pairs: tuple[tuple[int, int], ...]   # (dst patch in original, src in auxiliary)
    grid: PatchGrid
    self_paced: SelfPacedState | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if len(self.pairs) != self.n:
            raise ValueError(
                f"plan lists {len(self.pairs)} pairs but n = {self.n}")
        if self.n > self.grid.total:
            raise ValueError(
                f"n = {self.n} exceeds the grid's {self.grid.total} patches")
        dsts = [d for d, _ in self.pairs]
        srcs = [s for _, s in self.pairs]
        if len(set(dsts)) != len(dsts):
            raise ValueError("plan has overlapping destination patches")
        if len(set(srcs)) != len(srcs):
            raise ValueError("plan has duplicate source patches")

    def to_json_dict(self) -> dict:
        state = self.self_paced
        return {
            "strategy": self.strategy,
            "rule": self.rule,
            "n": self.n,
            "pairs": [list(p) for p in self.pairs],
            "lambda": None if state is None else state.lam,
            "proxy_loss": None if state is None else state.proxy,
            "mask": None if state is None else state.mask,
            "weight": None if state is None else state.weight,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


@dataclass(frozen=True)
class MixedSample:
    """A perturbed sample: image, label, and confidence moved as one unit."""

    image: torch.Tensor
    label: torch.Tensor
    confidence: torch.Tensor
    plan: MixPlan


def _validate_triple(triple: Triple, grid: PatchGrid, name: str) -> None:
    image, label, conf = triple
    if image.dim() != 3 or image.shape[0] != 1:
        raise ValueError(
            f"{name} image must be (1, H, W), got {tuple(image.shape)}")
    h, w = image.shape[1], image.shape[2]
    if label.shape != (h, w) or conf.shape != (h, w):
        raise ValueError(
            f"{name} label/confidence shapes {tuple(label.shape)}/"
            f"{tuple(conf.shape)} do not match image ({h}, {w})")
    if grid.rows * grid.patch_size != h or grid.cols * grid.patch_size != w:
        raise ValueError(
            f"grid {grid.rows}x{grid.cols} (patch {grid.patch_size}) does "
            f"not tile a {h}x{w} {name} sample")


def transplant(original: Triple, auxiliary: Triple, plan: MixPlan) -> MixedSample:
    """Copy the plan's auxiliary patches into a clone of the original.

    For each (dst, src) pair the auxiliary's src rectangle replaces the
    original's dst rectangle in the image, label, and confidence map alike;
    every other pixel is untouched.
    """
    _validate_triple(original, plan.grid, "original")
    _validate_triple(auxiliary, plan.grid, "auxiliary")
    if original[0].shape != auxiliary[0].shape:
        raise ValueError(
            f"original/auxiliary shapes differ: {tuple(original[0].shape)} "
            f"vs {tuple(auxiliary[0].shape)}")
    image = original[0].clone()
    label = original[1].clone()
    conf = original[2].clone()
    for dst, src in plan.pairs:
        dr0, dr1, dc0, dc1 = plan.grid.rect(dst)
        sr0, sr1, sc0, sc1 = plan.grid.rect(src)
        image[:, dr0:dr1, dc0:dc1] = auxiliary[0][:, sr0:sr1, sc0:sc1]
        label[dr0:dr1, dc0:dc1] = auxiliary[1][sr0:sr1, sc0:sc1]
        conf[dr0:dr1, dc0:dc1] = auxiliary[2][sr0:sr1, sc0:sc1]
    return MixedSample(image=image, label=label, confidence=conf, plan=plan)


def _grid_for(original: Triple, patch_size: int) -> PatchGrid:
    _, h, w = original[0].shape
    return PatchGrid.from_shape(h, w, patch_size)


def cutmix(original: Triple, auxiliary: Triple, n: int, patch_size: int,
           rng: np.random.Generator) -> MixedSample:
    """Replace n uniformly drawn patch positions with the auxiliary's content.

    Positions are drawn without replacement and are position-preserving
    (src = dst), i.e. the binary-mask formulation of patch mixing.
    """
    grid = _grid_for(original, patch_size)
    if not 0 <= n <= grid.total:
        raise ValueError(f"n = {n} outside [0, {grid.total}]")
    positions = rng.choice(grid.total, size=n, replace=False)
    pairs = tuple((int(p), int(p)) for p in positions)
    plan = MixPlan(strategy="cutmix", rule="random", n=n, pairs=pairs,
                   grid=grid)
    return transplant(original, auxiliary, plan)


def _ranked_pairs(conf_original: torch.Tensor, conf_auxiliary: torch.Tensor,
                  n: int, grid: PatchGrid,
                  rule: str) -> tuple[tuple[int, int], ...]:
    """Destination/source patch pairing for the confidence-ranked strategies.

    L_from_H: the original's n lowest-scoring patches receive the
    auxiliary's n highest-scoring patches (i-th lowest <- i-th highest).
    H_from_L is the mirror image.  Ties rank by ascending patch index.
    """
    scores_o = patch_scores(conf_original, grid)
    scores_a = patch_scores(conf_auxiliary, grid)
    if rule == LOW_FROM_HIGH:
        dst = rank_patches(scores_o, "lowest_first").top(n)
        src = rank_patches(scores_a, "highest_first").top(n)
    elif rule == HIGH_FROM_LOW:
        dst = rank_patches(scores_o, "highest_first").top(n)
        src = rank_patches(scores_a, "lowest_first").top(n)
    else:
        raise ValueError(f"unknown mix rule {rule!r}")
    return tuple(zip(dst, src))


def umix(original: Triple, auxiliary: Triple, n: int, patch_size: int,
         confidences: tuple[torch.Tensor, torch.Tensor] | None = None
         ) -> MixedSample:
    """Fixed easy-direction mixing: low-confidence patches get high-confidence
    content.  ``confidences`` optionally overrides the ranking maps; by
    default the triples' own confidence channels are ranked."""
    grid = _grid_for(original, patch_size)
    if not 0 <= n <= grid.total:
        raise ValueError(f"n = {n} outside [0, {grid.total}]")
    conf_o, conf_a = confidences if confidences is not None else (
        original[2], auxiliary[2])
    pairs = _ranked_pairs(conf_o, conf_a, n, grid, LOW_FROM_HIGH)
    plan = MixPlan(strategy="umix", rule=LOW_FROM_HIGH, n=n, pairs=pairs,
                   grid=grid)
    return transplant(original, auxiliary, plan)


def iumix(original: Triple, auxiliary: Triple, n: int, patch_size: int,
          confidences: tuple[torch.Tensor, torch.Tensor] | None = None
          ) -> MixedSample:
    """Fixed hard-direction mixing: high-confidence patches get low-confidence
    content.  The mirror image of ``umix``."""
    grid = _grid_for(original, patch_size)
    if not 0 <= n <= grid.total:
        raise ValueError(f"n = {n} outside [0, {grid.total}]")
    conf_o, conf_a = confidences if confidences is not None else (
        original[2], auxiliary[2])
    pairs = _ranked_pairs(conf_o, conf_a, n, grid, HIGH_FROM_LOW)
    plan = MixPlan(strategy="iumix", rule=HIGH_FROM_LOW, n=n, pairs=pairs,
                   grid=grid)
    return transplant(original, auxiliary, plan)


def adamix(original: tuple[torch.Tensor, torch.Tensor],
           auxiliary: tuple[torch.Tensor, torch.Tensor],
           model, schedule: AgeSchedule, t: float, max_patches: int,
           patch_size: int,
           precomputed_logits: tuple[torch.Tensor, torch.Tensor] | None = None
           ) -> MixedSample:
    """Adaptive mixing of an (image, label) pair with its auxiliary partner.

    Steps: score both samples with a no-gradient forward pass (or reuse
    ``precomputed_logits`` from one already taken on these exact images),
    compute the pair's proxy difficulty and the current age value, solve for
    the mixing direction and patch budget, and dispatch to the matching
    fixed-strategy pairing.  The solver outputs travel with the plan.

    Labels may be ground truth or pseudo labels; they are used both in the
    proxy loss and as the transplanted label content.
    """
    image_o, label_o = original
    image_a, label_a = auxiliary
    grid = PatchGrid.from_shape(image_o.shape[1], image_o.shape[2], patch_size)
    if max_patches > grid.total:
        raise ValueError(
            f"patch budget {max_patches} exceeds the grid's {grid.total}")
    if precomputed_logits is not None:
        logits_o, logits_a = precomputed_logits
    else:
        with torch.no_grad():
            logits_o = model(image_o)
            logits_a = model(image_a)
    _, conf_o = pseudo_label(softmax_probs(logits_o))
    _, conf_a = pseudo_label(softmax_probs(logits_a))

    proxy = proxy_loss(logits_o, label_o, logits_a, label_a)
    lam = age_lambda(t, schedule)
    state = solve_state(proxy, lam, max_patches)
    rule = mix_rule(state.mask)
    pairs = _ranked_pairs(conf_o, conf_a, state.n, grid, rule)
    plan = MixPlan(strategy="adamix", rule=rule, n=state.n, pairs=pairs,
                   grid=grid, self_paced=state)
    return transplant((image_o, label_o, conf_o),
                      (image_a, label_a, conf_a), plan)
