"""Heterogeneity-aware generative pretraining for CTR-style tabular data."""
from .balance import DifficultyTracker, FieldLosses, converge_s, equilibrium_s, grad_s, self_balancing_loss
from .diffusion import NoiseSchedule, TokenizedBatch, forward_mask
from .encode import CdfBinner, fit_binner
from .estimator import HeteroGenCTRClassifier
from .metrics import EvalReport, auc, logloss, reconstruction_accuracy, stratified_auc
from .schema import (
    Dataset,
    DatasetSchema,
    FieldKind,
    FieldSpec,
    RawSample,
    SyntheticConfig,
    build_schema,
    generate_dataset,
    heterogeneity_benchmark,
    load_dataset,
    save_dataset,
)
from .train import ModelState, TrainConfig, load_checkpoint, run_experiment, save_checkpoint

__version__ = "0.1.0"
