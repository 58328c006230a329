"""Self-paced curriculum: age schedule, proxy difficulty, mask/weight solvers.

The curriculum is controlled by an age value that ramps from exp(-5) up to 1
over training.  Each mixing decision scores the (original, auxiliary) pair
with a proxy loss, then solves two tiny optimization problems in closed form:

* a binary mask choosing the mixing direction -- minimizing
  ``mask * proxy - age * mask`` over {0, 1};
* a scalar weight in [0, 1] scaling how many patches move -- minimizing
  ``weight * proxy + age * (weight^2 / 2 - weight)``.

Brute-force minimizers for both objectives live here as well, so the
closed-form solvers can be validated by direct enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .losses import seg_loss

# Mixing directions: which confidence band receives transplanted patches.
LOW_FROM_HIGH = "L_from_H"   # easy: low-confidence patches get high-confidence content
HIGH_FROM_LOW = "H_from_L"   # hard: high-confidence patches get low-confidence content


@dataclass(frozen=True)
class AgeSchedule:
    """Gaussian ramp-up of the age value over ``max_iteration`` steps."""

    max_iteration: int

    def __post_init__(self):
        if self.max_iteration < 1:
            raise ValueError(
                f"max_iteration must be >= 1, got {self.max_iteration}")


def age_lambda(t: float, schedule: AgeSchedule) -> float:
    """exp(-5 * (1 - t / max_iteration)^2); rises from exp(-5) to 1."""
    tm = schedule.max_iteration
    if not 0 <= t <= tm:
        raise ValueError(f"iteration {t} outside [0, {tm}]")
    return math.exp(-5.0 * (1.0 - t / tm) ** 2)


def proxy_loss(pred_original: torch.Tensor, label_original: torch.Tensor,
               pred_auxiliary: torch.Tensor,
               label_auxiliary: torch.Tensor) -> float:
    """Difficulty score of a sample pair: sum of both segmentation losses.

    Each term is the per-pixel-mean CE+Dice loss of one (prediction, label)
    pair; no gradients are tracked.
    """
    with torch.no_grad():
        loss_o = seg_loss(pred_original.detach(), label_original)
        loss_a = seg_loss(pred_auxiliary.detach(), label_auxiliary)
        return float(loss_o) + float(loss_a)


def _check_solver_args(proxy: float, age: float) -> None:
    if age <= 0:
        raise ValueError(f"age must be positive, got {age}")
    if proxy < 0:
        raise ValueError(f"proxy loss must be non-negative, got {proxy}")


def solve_mask(proxy: float, age: float) -> int:
    """Closed-form binary mask: 1 when the pair is easy (proxy < age), else 0.

    The boundary proxy == age resolves to 0 (strict inequality).
    """
    _check_solver_args(proxy, age)
    return 1 if proxy < age else 0


def solve_weight(proxy: float, age: float) -> float:
    """Closed-form weight: clamp(1 - proxy / age, 0, 1)."""
    _check_solver_args(proxy, age)
    return min(1.0, max(0.0, 1.0 - proxy / age))


def mix_rule(mask: int) -> str:
    """Mixing direction selected by the mask: 1 -> H_from_L, 0 -> L_from_H."""
    if mask not in (0, 1):
        raise ValueError(f"mask must be 0 or 1, got {mask}")
    return HIGH_FROM_LOW if mask == 1 else LOW_FROM_HIGH


def rule_to_mask(rule: str) -> int:
    """Inverse of ``mix_rule``; the two directions encode the mask uniquely."""
    if rule == HIGH_FROM_LOW:
        return 1
    if rule == LOW_FROM_HIGH:
        return 0
    raise ValueError(f"unknown mix rule {rule!r}")


def patch_count(weight: float, max_patches: int) -> int:
    """Number of patches to transplant: round(weight * K), half-up, in [0, K]."""
    if max_patches < 0:
        raise ValueError(f"max_patches must be >= 0, got {max_patches}")
    n = math.floor(weight * max_patches + 0.5)
    return min(max_patches, max(0, n))


def mask_objective(mask: int, proxy: float, age: float) -> float:
    """Objective the binary mask minimizes: mask * proxy - age * mask."""
    return mask * proxy - age * mask


def weight_objective(weight: float, proxy: float, age: float) -> float:
    """Objective the weight minimizes: w * proxy + age * (w^2/2 - w)."""
    return weight * proxy + age * (0.5 * weight * weight - weight)


def brute_force_mask_oracle(proxy: float, age: float) -> int:
    """Two-point enumeration of the mask objective.

    On an exact tie both choices are co-optimal; the oracle reports the
    closed-form solver's pick so agreement checks treat ties as satisfied.
    """
    _check_solver_args(proxy, age)
    obj0 = mask_objective(0, proxy, age)
    obj1 = mask_objective(1, proxy, age)
    if obj0 == obj1:
        return solve_mask(proxy, age)
    return 1 if obj1 < obj0 else 0


def brute_force_weight_oracle(proxy: float, age: float,
                              grid_step: float = 1e-4) -> float:
    """Grid-search minimizer of the weight objective over {0, step, ..., 1}."""
    _check_solver_args(proxy, age)
    if not 0 < grid_step <= 1e-4:
        raise ValueError(f"grid_step must be in (0, 1e-4], got {grid_step}")
    steps = int(round(1.0 / grid_step))
    grid = np.linspace(0.0, 1.0, steps + 1)
    objective = grid * proxy + age * (0.5 * grid * grid - grid)
    return float(grid[int(np.argmin(objective))])


@dataclass(frozen=True)
class SelfPacedState:
    """Snapshot of one adaptive-mix decision, kept for instrumentation."""

    lam: float       # age value at this iteration, in (0, 1]
    proxy: float     # pair difficulty, >= 0
    mask: int        # mixing-direction decision, 0 or 1
    weight: float    # patch-budget fraction in [0, 1]
    n: int           # transplanted patch count in [0, K]

    def __post_init__(self):
        if self.mask != (1 if self.proxy < self.lam else 0):
            raise ValueError(
                f"inconsistent state: mask {self.mask} with proxy "
                f"{self.proxy} and age {self.lam}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"weight {self.weight} outside [0, 1]")
        if self.n < 0:
            raise ValueError(f"patch count {self.n} negative")


def solve_state(proxy: float, age: float, max_patches: int) -> SelfPacedState:
    """Run both solvers and package the full decision."""
    mask = solve_mask(proxy, age)
    weight = solve_weight(proxy, age)
    return SelfPacedState(lam=age, proxy=proxy, mask=mask, weight=weight,
                          n=patch_count(weight, max_patches))
