"""Desk-scale virtual-margin-regularization lab.

Synthetic noisy-label tasks, a small explicit-gradient classifier, trusted
small-loss selection, virtual-outlier synthesis, the additive
energy-separation objective, and paired baseline-vs-repair evaluation wired
through the generic dump/score/metric pipeline.
"""

from oodaudit.vmr.task import SyntheticTask, TaskConfig, gen_synthetic_task, inject_label_noise
from oodaudit.vmr.mlp import MlpModel
from oodaudit.vmr.train import (
    GaussianBank,
    TrainingDiverged,
    batch_loss_and_grads,
    export_evaldump,
    fit_class_gaussians,
    sample_virtual_outliers,
    select_trusted,
    train,
    vos_loss,
)
from oodaudit.vmr.experiment import VmrConfig, VmrPairedReport, vmr_experiment

__all__ = [
    "GaussianBank",
    "MlpModel",
    "SyntheticTask",
    "TaskConfig",
    "TrainingDiverged",
    "VmrConfig",
    "VmrPairedReport",
    "batch_loss_and_grads",
    "export_evaldump",
    "fit_class_gaussians",
    "gen_synthetic_task",
    "inject_label_noise",
    "sample_virtual_outliers",
    "select_trusted",
    "train",
    "vmr_experiment",
    "vos_loss",
]
