"""Semi-supervised training paradigms with injectable mix strategies.

Three paradigms share one step skeleton:

* self-training   -- one model pseudo-labels its own unlabeled inputs;
* mean-teacher    -- an EMA teacher produces pseudo labels and confidence
                     maps, the student trains, the teacher then tracks it;
* co-training     -- two peer models exchange pseudo labels; each model's
                     mixing signals come from its supervising peer.

Each step: weakly augment the batch, pseudo-label the unlabeled sub-batch
without gradients, build mixed samples per the configured strategy (cutmix /
umix / iumix / adamix / none) over reversed-batch partner pairing, apply
pixel-level jitter to the mixed images, forward, and minimize
``supervised + unsup_weight * confidence-thresholded unsupervised`` loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .confidence import pseudo_label, softmax_probs
from .losses import seg_loss, unsup_loss
from .mixers import adamix, cutmix, iumix, umix
from .models import OptimizerState, ema_update, optimizer_step
from .selfpaced import AgeSchedule, SelfPacedState, age_lambda

PARADIGMS = ("self_training", "mean_teacher", "co_training")
STRATEGY_CHOICES = ("cutmix", "umix", "iumix", "adamix", "none")

_SEED_BOUND = 2**63


@dataclass
class ParadigmConfig:
    """Which paradigm and mix strategy to train with, plus their knobs.

    Desk-scale defaults: patch budget 16 over an 8x8 grid of 8-pixel patches
    on 64x64 inputs.  (At full scale the same budget is used with 32-pixel
    patches on 256x256 inputs.)
    """

    paradigm: str = "self_training"
    strategy: str = "adamix"
    tau: float = 0.95
    max_patches: int = 16
    patch_size: int = 8
    ema_alpha: float = 0.99
    unsup_weight: float = 1.0

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.strategy not in STRATEGY_CHOICES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.max_patches < 0:
            raise ValueError(f"max_patches must be >= 0, got {self.max_patches}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must be in [0, 1], got {self.ema_alpha}")
        if self.unsup_weight < 0:
            raise ValueError(
                f"unsup_weight must be >= 0, got {self.unsup_weight}")

    def to_json_dict(self) -> dict:
        return {
            "paradigm": self.paradigm,
            "strategy": self.strategy,
            "tau": self.tau,
            "max_patches": self.max_patches,
            "patch_size": self.patch_size,
            "ema_alpha": self.ema_alpha,
            "unsup_weight": self.unsup_weight,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ParadigmConfig":
        known = set(cls().to_json_dict())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown paradigm config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class Batch:
    """One training step's samples: (image, label) pairs plus bare images."""

    labeled: list[tuple[torch.Tensor, torch.Tensor]]
    unlabeled: list[torch.Tensor]


def partner_index(i: int, size: int) -> int:
    """Auxiliary partner within a sub-batch: reversed order.

    Odd sizes rotate by one instead, so no sample partners itself whenever
    the sub-batch has more than one element.
    """
    if size <= 1:
        return 0
    if size % 2 == 0:
        return size - 1 - i
    return (i + 1) % size


# --------------------------------------------------------------------------
# Augmentations.  Weak = geometric only; the pixel-level jitter is applied on
# top of the weak view (after mixing), completing the strong perturbation.

@dataclass(frozen=True)
class WeakAugParams:
    flip_h: bool
    flip_v: bool
    quarter_turns: int


def draw_weak_params(rng: np.random.Generator) -> WeakAugParams:
    return WeakAugParams(flip_h=bool(rng.integers(2)),
                         flip_v=bool(rng.integers(2)),
                         quarter_turns=int(rng.integers(4)))


def weak_aug(image: torch.Tensor, label: torch.Tensor | None = None, *,
             params: WeakAugParams | None = None,
             rng: np.random.Generator | None = None
             ) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Random flips and quarter rotations, applied identically to the label."""
    if params is None:
        if rng is None:
            raise ValueError("weak_aug needs either params or an rng")
        params = draw_weak_params(rng)

    def apply(t: torch.Tensor) -> torch.Tensor:
        if params.flip_h:
            t = torch.flip(t, dims=(-1,))
        if params.flip_v:
            t = torch.flip(t, dims=(-2,))
        if params.quarter_turns:
            t = torch.rot90(t, k=params.quarter_turns, dims=(-2, -1))
        return t

    out_label = None if label is None else apply(label)
    return apply(image), out_label


@dataclass(frozen=True)
class PixelAugParams:
    brightness: float
    contrast: float
    noise: np.ndarray


def draw_pixel_params(rng: np.random.Generator,
                      shape: tuple[int, ...]) -> PixelAugParams:
    brightness = float(rng.uniform(-0.2, 0.2))
    contrast = float(rng.uniform(-0.2, 0.2))
    sigma = float(rng.uniform(0.0, 0.05))
    noise = rng.normal(0.0, 1.0, size=shape) * sigma
    return PixelAugParams(brightness=brightness, contrast=contrast,
                          noise=noise)


def strong_aug_pixel(image: torch.Tensor, *,
                     params: PixelAugParams | None = None,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """Brightness/contrast jitter (within +-0.2) plus Gaussian noise
    (sigma <= 0.05), clipped back to [0, 1]."""
    if params is None:
        if rng is None:
            raise ValueError("strong_aug_pixel needs either params or an rng")
        params = draw_pixel_params(rng, tuple(image.shape))
    out = (image - 0.5) * (1.0 + params.contrast) + 0.5 + params.brightness
    out = out + torch.from_numpy(params.noise).to(image.dtype)
    return out.clamp(0.0, 1.0)


# --------------------------------------------------------------------------
# Step instrumentation.

STEPLOG_COLUMNS = ("iteration", "lambda", "proxy_loss", "mask", "weight", "n",
                   "loss_sup", "loss_unsup", "loss_total")


@dataclass
class StepLog:
    """Everything one training step reports.

    ``mix_states`` holds one solver snapshot per adaptive-mix invocation in
    the step (empty for other strategies); the CSV row aggregates them as
    means.  ``loss_total`` is computed from the logged components, so the
    objective's decomposition is exactly recomputable from the row.
    """

    iteration: int
    lam: float
    mix_states: tuple[SelfPacedState, ...]
    loss_sup: float
    loss_unsup: float
    loss_total: float

    def _mean(self, attr: str) -> float | None:
        if not self.mix_states:
            return None
        return sum(getattr(s, attr) for s in self.mix_states) / len(
            self.mix_states)

    @property
    def proxy_mean(self) -> float | None:
        return self._mean("proxy")

    @property
    def mask_mean(self) -> float | None:
        return self._mean("mask")

    @property
    def weight_mean(self) -> float | None:
        return self._mean("weight")

    @property
    def n_mean(self) -> float | None:
        return self._mean("n")

    def csv_row(self) -> list[str]:
        def fmt(value: float | None) -> str:
            return "" if value is None else repr(float(value))

        return [str(self.iteration), fmt(self.lam), fmt(self.proxy_mean),
                fmt(self.mask_mean), fmt(self.weight_mean), fmt(self.n_mean),
                fmt(self.loss_sup), fmt(self.loss_unsup),
                fmt(self.loss_total)]


def _make_log(iteration: int, lam: float, states: list[SelfPacedState],
              loss_sup: float, loss_unsup: float,
              unsup_weight: float) -> StepLog:
    return StepLog(iteration=iteration, lam=lam, mix_states=tuple(states),
                   loss_sup=loss_sup, loss_unsup=loss_unsup,
                   loss_total=loss_sup + unsup_weight * loss_unsup)


# --------------------------------------------------------------------------
# The shared step skeleton.

def _producer_signals(producer: nn.Module, images: list[torch.Tensor]
                      ) -> tuple[list[torch.Tensor], list[torch.Tensor],
                                 list[torch.Tensor]]:
    """No-gradient forward of a list of images: logits, labels, confidences."""
    with torch.no_grad():
        logits = producer(torch.stack(images))
    out_logits, out_labels, out_confs = [], [], []
    for k in range(len(images)):
        probs = softmax_probs(logits[k])
        label, conf = pseudo_label(probs)
        out_logits.append(logits[k])
        out_labels.append(label)
        out_confs.append(conf)
    return out_logits, out_labels, out_confs


def _mix_subbatch(images: list[torch.Tensor], labels: list[torch.Tensor],
                  confs: list[torch.Tensor],
                  logits: list[torch.Tensor] | None,
                  producer: nn.Module, cfg: ParadigmConfig,
                  schedule: AgeSchedule, t: int,
                  mix_rng: np.random.Generator,
                  states: list[SelfPacedState]
                  ) -> tuple[list[torch.Tensor], list[torch.Tensor],
                             list[torch.Tensor]]:
    """Mix every sample with its partner per the configured strategy."""
    size = len(images)
    out_images, out_labels, out_confs = [], [], []
    for i in range(size):
        j = partner_index(i, size)
        if cfg.strategy == "none":
            out_images.append(images[i])
            out_labels.append(labels[i])
            out_confs.append(confs[i])
            continue
        original = (images[i], labels[i], confs[i])
        auxiliary = (images[j], labels[j], confs[j])
        if cfg.strategy == "cutmix":
            mixed = cutmix(original, auxiliary, cfg.max_patches,
                           cfg.patch_size, mix_rng)
        elif cfg.strategy == "umix":
            mixed = umix(original, auxiliary, cfg.max_patches, cfg.patch_size)
        elif cfg.strategy == "iumix":
            mixed = iumix(original, auxiliary, cfg.max_patches,
                          cfg.patch_size)
        elif cfg.strategy == "adamix":
            mixed = adamix((images[i], labels[i]), (images[j], labels[j]),
                           producer, schedule, t, cfg.max_patches,
                           cfg.patch_size,
                           precomputed_logits=(logits[i], logits[j]))
            states.append(mixed.plan.self_paced)
        else:  # pragma: no cover - guarded by ParadigmConfig.validate
            raise ValueError(f"unknown strategy {cfg.strategy!r}")
        out_images.append(mixed.image)
        out_labels.append(mixed.label)
        out_confs.append(mixed.confidence)
    return out_images, out_labels, out_confs


def _branch_loss(train_model: nn.Module, producer: nn.Module, batch: Batch,
                 cfg: ParadigmConfig, schedule: AgeSchedule, t: int,
                 aug_seed: int, mix_seed: int
                 ) -> tuple[torch.Tensor, float, float,
                            list[SelfPacedState]]:
    """Build one model's mixed views and return its step loss.

    Randomness comes only from the two seeds, so co-training can run the
    same draws for both of its branches.
    """
    aug_rng = np.random.default_rng(aug_seed)
    mix_rng = np.random.default_rng(mix_seed)
    states: list[SelfPacedState] = []
    needs_conf = cfg.strategy in ("umix", "iumix", "adamix")

    # Weak geometric views; labels co-transform.  Draw order is fixed:
    # labeled samples first, then unlabeled.
    weak_labeled = [weak_aug(img, lab, rng=aug_rng)
                    for img, lab in batch.labeled]
    weak_unlabeled = [weak_aug(img, rng=aug_rng)[0]
                      for img in batch.unlabeled]

    # Producer signals, without gradients.
    ones_like = None
    if weak_labeled:
        images_l = [img for img, _ in weak_labeled]
        labels_l = [lab for _, lab in weak_labeled]
        if needs_conf:
            logits_l, _, confs_l = _producer_signals(producer, images_l)
        else:
            logits_l = None
            ones_like = torch.ones_like(images_l[0][0])
            confs_l = [ones_like] * len(images_l)
    if weak_unlabeled:
        logits_u, pseudo_u, confs_u = _producer_signals(producer,
                                                        weak_unlabeled)

    # Mixing, labeled sub-batch first.
    mixed_images: list[torch.Tensor] = []
    num_labeled = len(weak_labeled)
    if weak_labeled:
        imgs, labs, _ = _mix_subbatch(images_l, labels_l, confs_l, logits_l,
                                      producer, cfg, schedule, t, mix_rng,
                                      states)
        mixed_images.extend(imgs)
        mixed_labels_l = labs
    if weak_unlabeled:
        imgs, labs, confs = _mix_subbatch(weak_unlabeled, pseudo_u, confs_u,
                                          logits_u, producer, cfg, schedule,
                                          t, mix_rng, states)
        mixed_images.extend(imgs)
        mixed_pseudo_u, mixed_confs_u = labs, confs

    # Pixel-level jitter completes the strong perturbation; same draw order.
    strong = [strong_aug_pixel(img, rng=aug_rng) for img in mixed_images]
    all_logits = train_model(torch.stack(strong))

    if weak_labeled:
        sup_terms = [seg_loss(all_logits[i], mixed_labels_l[i])
                     for i in range(num_labeled)]
        loss_sup = torch.stack(sup_terms).mean()
    else:
        loss_sup = torch.zeros(())
    if weak_unlabeled:
        unsup_terms = [
            unsup_loss(all_logits[num_labeled + j], mixed_pseudo_u[j],
                       mixed_confs_u[j], cfg.tau)
            for j in range(len(weak_unlabeled))
        ]
        loss_unsup = torch.stack(unsup_terms).mean()
    else:
        loss_unsup = torch.zeros(())

    total = loss_sup + cfg.unsup_weight * loss_unsup
    return total, float(loss_sup.detach()), float(loss_unsup.detach()), states


def _apply_update(total: torch.Tensor, model: nn.Module,
                  opt_state: OptimizerState) -> None:
    model.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    optimizer_step(opt_state, model)


def train_step_st(model: nn.Module, opt_state: OptimizerState, batch: Batch,
                  cfg: ParadigmConfig, t: int, schedule: AgeSchedule,
                  rng_aug: np.random.Generator,
                  rng_mix: np.random.Generator) -> StepLog:
    """Self-training step: the model pseudo-labels for itself."""
    aug_seed = int(rng_aug.integers(_SEED_BOUND))
    mix_seed = int(rng_mix.integers(_SEED_BOUND))
    total, loss_sup, loss_unsup, states = _branch_loss(
        model, model, batch, cfg, schedule, t, aug_seed, mix_seed)
    _apply_update(total, model, opt_state)
    return _make_log(t, age_lambda(t, schedule), states, loss_sup,
                     loss_unsup, cfg.unsup_weight)


def train_step_mt(student: nn.Module, teacher: nn.Module,
                  opt_state: OptimizerState, batch: Batch,
                  cfg: ParadigmConfig, t: int, schedule: AgeSchedule,
                  rng_aug: np.random.Generator,
                  rng_mix: np.random.Generator) -> StepLog:
    """Mean-teacher step: the EMA teacher supplies pseudo labels and
    confidence maps; after the student's update the teacher tracks it."""
    aug_seed = int(rng_aug.integers(_SEED_BOUND))
    mix_seed = int(rng_mix.integers(_SEED_BOUND))
    total, loss_sup, loss_unsup, states = _branch_loss(
        student, teacher, batch, cfg, schedule, t, aug_seed, mix_seed)
    _apply_update(total, student, opt_state)
    ema_update(teacher, student, cfg.ema_alpha)
    return _make_log(t, age_lambda(t, schedule), states, loss_sup,
                     loss_unsup, cfg.unsup_weight)


def train_step_ct(model1: nn.Module, model2: nn.Module,
                  opt1: OptimizerState, opt2: OptimizerState, batch: Batch,
                  cfg: ParadigmConfig, t: int, schedule: AgeSchedule,
                  rng_aug: np.random.Generator,
                  rng_mix: np.random.Generator) -> StepLog:
    """Co-training step: each model trains against its peer's pseudo labels.

    Both branches replay identical augmentation and mixing draws, so two
    identically initialized models receive identical updates; the logged
    losses and solver states aggregate both branches.
    """
    aug_seed = int(rng_aug.integers(_SEED_BOUND))
    mix_seed = int(rng_mix.integers(_SEED_BOUND))
    total1, sup1, unsup1, states1 = _branch_loss(
        model1, model2, batch, cfg, schedule, t, aug_seed, mix_seed)
    total2, sup2, unsup2, states2 = _branch_loss(
        model2, model1, batch, cfg, schedule, t, aug_seed, mix_seed)
    _apply_update(total1, model1, opt1)
    _apply_update(total2, model2, opt2)
    return _make_log(t, age_lambda(t, schedule), states1 + states2,
                     (sup1 + sup2) / 2.0, (unsup1 + unsup2) / 2.0,
                     cfg.unsup_weight)
