"""Reproducible experiment runner: training loops, evaluation, comparisons.

A run is fully described by a ``RunConfig``; everything stochastic flows from
its seed through named numpy streams (data order, augmentation, mixing) and
the model-init generators, so replaying a config reproduces ``steplog.csv``
bit for bit.  Each run writes an output directory with::

    config.json     the exact configuration (replayable)
    steplog.csv     one row per training iteration
    curves.csv      per-epoch validation loss / DSC and mean unsupervised loss
    checkpoint.amck final model parameters
    eval.csv        written by ``evaluate_run``

The dataset is regenerated from the config's embedded dataset spec rather
than read from an exported directory, which keeps single-file replayability;
exported PGM datasets are an interchange format, not a training dependency.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data_synth import DatasetSpec, SegDataset, generate
from .losses import seg_loss
from .metrics import (EVAL_CSV_COLUMNS, MetricReport, evaluate_sample,
                      report_csv_rows)
from .models import (build_model, load_checkpoint, make_optimizer,
                     save_checkpoint)
from .selfpaced import AgeSchedule
from .ssl import (STEPLOG_COLUMNS, Batch, ParadigmConfig, train_step_ct,
                  train_step_mt, train_step_st)

SCHEMA_VERSION = 1
CHECKPOINT_NAME = "checkpoint.amck"
# Offset deriving the co-training peer's init seed from the run seed.
PEER_SEED_OFFSET = 1_000_003

CURVES_COLUMNS = ("strategy", "paradigm", "seed", "iteration", "loss_unsup",
                  "loss_val", "dsc_val")


@dataclass
class RunConfig:
    """Everything one training run needs, JSON-serializable."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    paradigm: ParadigmConfig = field(default_factory=ParadigmConfig)
    epochs: int = 40
    labeled_batch: int = 4
    unlabeled_batch: int = 4
    seed: int = 0
    output_dir: str = "runs/run0"

    def validate(self) -> None:
        self.dataset.validate()
        self.paradigm.validate()
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.labeled_batch < 1:
            raise ValueError(
                f"labeled_batch must be >= 1, got {self.labeled_batch}")
        if self.unlabeled_batch < 0:
            raise ValueError(
                f"unlabeled_batch must be >= 0, got {self.unlabeled_batch}")
        size, patch = self.dataset.image_size, self.paradigm.patch_size
        if size % patch != 0:
            raise ValueError(
                f"patch size {patch} does not tile {size}x{size} images")
        grid_total = (size // patch) ** 2
        if self.paradigm.strategy != "none" and \
                self.paradigm.max_patches > grid_total:
            raise ValueError(
                f"patch budget {self.paradigm.max_patches} exceeds the "
                f"{grid_total}-patch grid")

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset.to_json_dict(),
            "paradigm": self.paradigm.to_json_dict(),
            "epochs": self.epochs,
            "labeled_batch": self.labeled_batch,
            "unlabeled_batch": self.unlabeled_batch,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RunConfig":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported config schema_version "
                f"{data.get('schema_version')!r} (expected {SCHEMA_VERSION})")
        known = {"schema_version", "dataset", "paradigm", "epochs",
                 "labeled_batch", "unlabeled_batch", "seed", "output_dir"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(
            dataset=DatasetSpec.from_json_dict(data.get("dataset", {})),
            paradigm=ParadigmConfig.from_json_dict(data.get("paradigm", {})),
            epochs=data.get("epochs", 40),
            labeled_batch=data.get("labeled_batch", 4),
            unlabeled_batch=data.get("unlabeled_batch", 4),
            seed=data.get("seed", 0),
            output_dir=data.get("output_dir", "runs/run0"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _to_torch_image(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr))


def _to_torch_label(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr))


def _cyclic_slice(ids: np.ndarray, start: int, count: int) -> list:
    if len(ids) == 0 or count == 0:
        return []
    return [ids[(start + k) % len(ids)] for k in range(count)]


def _write_csv(path: Path, header: tuple[str, ...],
               rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


@torch.no_grad()
def _predict_labels(model: torch.nn.Module, images: list[np.ndarray],
                    chunk: int = 8) -> list[np.ndarray]:
    out = []
    for start in range(0, len(images), chunk):
        stack = torch.stack([_to_torch_image(a)
                             for a in images[start:start + chunk]])
        logits = model(stack)
        out.extend(logits.argmax(dim=1).numpy())
    return out


@torch.no_grad()
def _validation_scores(model: torch.nn.Module, dataset: SegDataset,
                       split: str, n_classes: int) -> tuple[float, float]:
    """(mean per-sample segmentation loss, mean macro foreground DSC)."""
    ids = dataset.ids(split)
    images = [dataset.image(i) for i in ids]
    labels = [dataset.label(i) for i in ids]
    losses, dscs = [], []
    for start in range(0, len(ids), 8):
        stack = torch.stack([_to_torch_image(a)
                             for a in images[start:start + 8]])
        logits = model(stack)
        preds = logits.argmax(dim=1).numpy()
        for k in range(stack.shape[0]):
            target = _to_torch_label(labels[start + k])
            losses.append(float(seg_loss(logits[k], target)))
            report = evaluate_sample("", preds[k], labels[start + k],
                                     n_classes)
            dscs.append(report.macro_dsc)
    return sum(losses) / len(losses), sum(dscs) / len(dscs)


def run_training(config: RunConfig, progress: bool = False) -> Path:
    """Train per the config; returns the run directory.

    Refuses to overwrite an existing output directory.
    """
    config.validate()
    out = Path(config.output_dir)
    if out.exists():
        raise FileExistsError(f"run directory {out} already exists")
    out.mkdir(parents=True)
    (out / "config.json").write_text(
        json.dumps(config.to_json_dict(), indent=2, sort_keys=True) + "\n")

    # Bit-identical replay needs a fixed thread count for torch reductions.
    torch.set_num_threads(1)

    dataset = SegDataset(generate(config.dataset))
    labeled_ids = np.array(dataset.ids("train_labeled"))
    unlabeled_ids = np.array(dataset.ids("train_unlabeled"))
    n_classes = config.dataset.n_classes

    per_step = config.labeled_batch + config.unlabeled_batch
    n_train = len(labeled_ids) + len(unlabeled_ids)
    steps_per_epoch = max(1, math.ceil(n_train / max(1, per_step)))
    total_iterations = config.epochs * steps_per_epoch
    schedule = AgeSchedule(max_iteration=total_iterations)

    rng_data = np.random.default_rng((config.seed, 1))
    rng_aug = np.random.default_rng((config.seed, 2))
    rng_mix = np.random.default_rng((config.seed, 3))

    paradigm = config.paradigm
    model = build_model(n_classes, seed=config.seed)
    opt = make_optimizer(model)
    teacher = model2 = opt2 = None
    if paradigm.paradigm == "mean_teacher":
        teacher = copy.deepcopy(model)
        for p in teacher.parameters():
            p.requires_grad_(False)
    elif paradigm.paradigm == "co_training":
        model2 = build_model(n_classes, seed=config.seed + PEER_SEED_OFFSET)
        opt2 = make_optimizer(model2)

    labeled_cache = {
        i: (_to_torch_image(dataset.image(i)),
            _to_torch_label(dataset.label(i)))
        for i in labeled_ids
    }
    unlabeled_cache = {i: _to_torch_image(dataset.image(i))
                       for i in unlabeled_ids}

    step_rows: list[list[str]] = []
    curve_rows: list[list[str]] = []
    iteration = 0
    for epoch in range(config.epochs):
        order_l = rng_data.permutation(labeled_ids)
        order_u = rng_data.permutation(unlabeled_ids)
        epoch_unsup: list[float] = []
        for s in range(steps_per_epoch):
            batch = Batch(
                labeled=[labeled_cache[i] for i in _cyclic_slice(
                    order_l, s * config.labeled_batch, config.labeled_batch)],
                unlabeled=[unlabeled_cache[i] for i in _cyclic_slice(
                    order_u, s * config.unlabeled_batch,
                    config.unlabeled_batch)],
            )
            if paradigm.paradigm == "self_training":
                log = train_step_st(model, opt, batch, paradigm, iteration,
                                    schedule, rng_aug, rng_mix)
            elif paradigm.paradigm == "mean_teacher":
                log = train_step_mt(model, teacher, opt, batch, paradigm,
                                    iteration, schedule, rng_aug, rng_mix)
            else:
                log = train_step_ct(model, model2, opt, opt2, batch,
                                    paradigm, iteration, schedule, rng_aug,
                                    rng_mix)
            step_rows.append(log.csv_row())
            epoch_unsup.append(log.loss_unsup)
            iteration += 1
        loss_val, dsc_val = _validation_scores(model, dataset, "val",
                                               n_classes)
        curve_rows.append([
            paradigm.strategy, paradigm.paradigm, str(config.seed),
            str(iteration), repr(sum(epoch_unsup) / len(epoch_unsup)),
            repr(loss_val), repr(dsc_val),
        ])
        if progress:
            print(f"epoch {epoch + 1}/{config.epochs}: "
                  f"val loss {loss_val:.4f}, val DSC {dsc_val:.4f}")

    if dataset.label_reads.get("train_unlabeled", 0) != 0:
        raise RuntimeError(
            "training read labels of unlabeled samples "
            f"({dataset.label_reads['train_unlabeled']} reads)")

    _write_csv(out / "steplog.csv", STEPLOG_COLUMNS, step_rows)
    _write_csv(out / "curves.csv", CURVES_COLUMNS, curve_rows)
    save_checkpoint(out / CHECKPOINT_NAME, model, step=iteration,
                    seed=config.seed)
    return out


def evaluate_run(run_dir: str | Path, split: str = "test"
                 ) -> tuple[list[MetricReport], Path]:
    """Evaluate a finished run's checkpoint on a dataset split.

    Regenerates the dataset from the run's config, writes ``eval.csv`` into
    the run directory, and returns the per-sample reports.
    """
    run_dir = Path(run_dir)
    config = RunConfig.from_json_file(run_dir / "config.json")
    model, _ = load_checkpoint(run_dir / CHECKPOINT_NAME)
    torch.set_num_threads(1)
    dataset = SegDataset(generate(config.dataset))
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    preds = _predict_labels(model, [dataset.image(i) for i in ids])
    reports = [
        evaluate_sample(sample_id, pred, dataset.label(sample_id),
                        config.dataset.n_classes)
        for sample_id, pred in zip(ids, preds)
    ]
    rows = [row for report in reports for row in report_csv_rows(report)]
    _write_csv(run_dir / "eval.csv", EVAL_CSV_COLUMNS, rows)
    return reports, run_dir / "eval.csv"


def mean_test_dsc(reports: list[MetricReport]) -> float:
    return sum(r.macro_dsc for r in reports) / len(reports)


# --------------------------------------------------------------------------
# Multi-config comparisons.

def _comparable_key(config: RunConfig) -> dict:
    """Everything that must match for configs to be comparable."""
    data = config.to_json_dict()
    data["paradigm"] = dict(data["paradigm"])
    data["paradigm"].pop("strategy")
    data["paradigm"].pop("paradigm")
    data.pop("output_dir")
    data.pop("seed")
    return data

def _train_worker(config_json: dict) -> str:
    config = RunConfig.from_json_dict(config_json)
    return str(run_training(config))


def run_compare(configs: list[RunConfig], seeds: list[int],
                out_dir: str | Path, workers: int | None = None) -> Path:
    """Run every config over the shared seeds; emit joint curves and summary.

    Configs must differ only in mix strategy and/or paradigm.  Worker count
    comes from ``ADAMIX_NUM_WORKERS`` when not given explicitly.
    """
    if not configs:
        raise ValueError("no configs to compare")
    if not seeds:
        raise ValueError("no seeds given")
    base = _comparable_key(configs[0])
    for other in configs[1:]:
        if _comparable_key(other) != base:
            raise ValueError(
                "configs must differ only in strategy/paradigm to be "
                "comparable")
    variants = {(c.paradigm.paradigm, c.paradigm.strategy) for c in configs}
    if len(variants) != len(configs):
        raise ValueError("duplicate strategy/paradigm combinations")

    out = Path(out_dir)
    if workers is None:
        workers = int(os.environ.get("ADAMIX_NUM_WORKERS", "1"))
    jobs = []
    for config in configs:
        for seed in seeds:
            name = f"{config.paradigm.paradigm}-{config.paradigm.strategy}-seed{seed}"
            jobs.append(replace(config, seed=seed,
                                output_dir=str(out / "runs" / name)))

    if workers > 1:
        import concurrent.futures as futures
        ctx_jobs = [j.to_json_dict() for j in jobs]
        with futures.ProcessPoolExecutor(max_workers=workers) as pool:
            run_dirs = list(pool.map(_train_worker, ctx_jobs))
    else:
        run_dirs = [str(run_training(j)) for j in jobs]

    # Joint curves: concatenate each run's rows (shared schema).
    joint_rows: list[list[str]] = []
    for run_dir in run_dirs:
        with open(Path(run_dir) / "curves.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CURVES_COLUMNS:
                raise ValueError(f"unexpected curves schema in {run_dir}")
            joint_rows.extend(list(reader))
    _write_csv(out / "curves.csv", CURVES_COLUMNS, joint_rows)

    # Summary: mean +- std of final test DSC per config over the seeds.
    summary_rows = []
    by_variant: dict[tuple[str, str], list[float]] = {}
    for config, run_dir in zip(
            [j for j in jobs], run_dirs):
        reports, _ = evaluate_run(run_dir, "test")
        key = (config.paradigm.paradigm, config.paradigm.strategy)
        by_variant.setdefault(key, []).append(mean_test_dsc(reports))
    for (paradigm, strategy), values in by_variant.items():
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        summary_rows.append([strategy, paradigm, str(len(values)),
                             repr(mean), repr(math.sqrt(var))])
    _write_csv(out / "summary.csv",
               ("strategy", "paradigm", "n_seeds", "dsc_mean", "dsc_std"),
               summary_rows)
    return out


def plot_curves(curve_files: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Render loss and DSC curves (mean over seeds) to PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    for path in curve_files:
        path = Path(path)
        if path.is_dir():
            path = path / "curves.csv"
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CURVES_COLUMNS:
                raise ValueError(f"unexpected curves schema in {path}")
            rows.extend(list(reader))
    if not rows:
        raise ValueError("no curve rows to plot")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series: dict[tuple[str, str], dict[int, list[tuple[float, float, float]]]] = {}
    for strategy, paradigm, _seed, iteration, lu, lv, dv in rows:
        key = (strategy, paradigm)
        series.setdefault(key, {}).setdefault(int(iteration), []).append(
            (float(lu), float(lv), float(dv)))

    outputs = []
    panels = (("loss_unsup", 0, "unsupervised loss"),
              ("loss_val", 1, "validation loss"),
              ("dsc_val", 2, "validation DSC"))
    for name, column, title in panels:
        fig, ax = plt.subplots(figsize=(6, 4))
        for (strategy, paradigm), per_iter in sorted(series.items()):
            xs = sorted(per_iter)
            ys = [sum(v[column] for v in per_iter[x]) / len(per_iter[x])
                  for x in xs]
            ax.plot(xs, ys, label=f"{strategy}/{paradigm}")
        ax.set_xlabel("iteration")
        ax.set_ylabel(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        target = out / f"{name}.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        outputs.append(target)
    return outputs
