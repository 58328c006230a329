"""Self-paced adaptive patch mixing for semi-supervised segmentation."""

from .confidence import (PatchGrid, PatchRanking, patch_scores, pseudo_label,
                         rank_patches, softmax_probs)
from .data_synth import (DatasetSpec, SegDataset, export_dataset, generate,
                         import_dataset)
from .losses import cross_entropy, seg_loss, soft_dice, unsup_loss
from .metrics import (ClassMetrics, MetricReport, dice, evaluate_sample,
                      jaccard, surface_distances)
from .mixers import MixedSample, MixPlan, adamix, cutmix, iumix, transplant, umix
from .models import (SmallSegNet, build_model, count_parameters, ema_update,
                     gradient_check, load_checkpoint, make_optimizer,
                     optimizer_step, save_checkpoint)
from .runner import (RunConfig, evaluate_run, plot_curves, run_compare,
                     run_training)
from .selfpaced import (AgeSchedule, SelfPacedState, age_lambda, patch_count,
                        proxy_loss, solve_mask, solve_state, solve_weight)
from .ssl import (Batch, ParadigmConfig, StepLog, train_step_ct,
                  train_step_mt, train_step_st)

__version__ = "0.1.0"

__all__ = [
    "AgeSchedule", "Batch", "ClassMetrics", "DatasetSpec", "MetricReport",
    "MixPlan", "MixedSample", "ParadigmConfig", "PatchGrid", "PatchRanking",
    "RunConfig", "SegDataset", "SelfPacedState", "SmallSegNet", "StepLog",
    "adamix", "age_lambda", "build_model", "count_parameters",
    "cross_entropy", "cutmix", "dice", "ema_update", "evaluate_run",
    "evaluate_sample", "export_dataset", "generate", "gradient_check",
    "import_dataset", "iumix", "jaccard", "load_checkpoint",
    "make_optimizer", "optimizer_step", "patch_count", "patch_scores",
    "plot_curves", "proxy_loss", "pseudo_label", "rank_patches",
    "run_compare", "run_training", "save_checkpoint", "seg_loss",
    "soft_dice", "softmax_probs", "solve_mask", "solve_state",
    "solve_weight", "surface_distances", "train_step_ct", "train_step_mt",
    "train_step_st", "transplant", "umix", "unsup_loss", "__version__",
]
