"""scikit-learn style wrapper around the two-stage pretrain / fine-tune pipeline."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import auc
from .schema import Dataset, validate_dataset
from .train import (
    ModelState,
    TrainConfig,
    ctr_logits,
    finetune,
    pretrain,
    reconstruction_report,
    sigmoid,
)


def check_dataset(X, schema=None) -> Dataset:
    """Accept a :class:`Dataset`, or a list of RawSample once a schema is known."""
    if isinstance(X, Dataset):
        data = X
    elif schema is not None:
        data = Dataset.from_samples(schema, list(X))
    else:
        raise TypeError("expected a Dataset (raw samples need a fitted schema)")
    if len(data) == 0:
        raise ValueError("empty dataset")
    validate_dataset(data)
    if schema is not None and data.schema.digest() != schema.digest():
        raise ValueError("dataset schema differs from the one seen in fit")
    return data


class HeteroGenCTRClassifier(ClassifierMixin, BaseEstimator):
    """Generative pretraining with per-field difficulty balancing, then BCE fine-tuning.

    ``fit`` takes a :class:`~hetctr.schema.Dataset`; its label column is the
    target unless ``y`` is passed. Hyperparameters mirror :class:`TrainConfig`.
    """

    def __init__(
        self,
        variant="full",
        lr=0.05,
        finetune_lr=None,
        batch_size=256,
        pretrain_epochs=10,
        finetune_epochs=2,
        T=100,
        seed=0,
        l2=0.0,
        d=16,
        n_layers=2,
        optimizer="sgd",
        momentum=0.0,
    ):
        self.variant = variant
        self.lr = lr
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.T = T
        self.seed = seed
        self.l2 = l2
        self.d = d
        self.n_layers = n_layers
        self.optimizer = optimizer
        self.momentum = momentum

    def _config(self) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in known})

    def fit(self, X, y=None):
        data = check_dataset(X)
        if y is not None:
            y = np.asarray(y)
            if y.shape != (len(data),):
                raise ValueError("y must have one entry per sample")
            columns = dict(data.columns)
            columns[data.schema.label.name] = y.astype(np.int64)
            data = validate_dataset(Dataset(data.schema, columns, data.latent))
        config = self._config()
        self.config_ = config
        self.schema_ = data.schema
        self.classes_ = np.array([0, 1])
        self.state_ = ModelState.initial(data.schema, data, config)
        tokens = self.state_.tokens(data)
        pretrain(self.state_, tokens, config)
        self.s_pretrained_ = self.state_.s.copy()
        finetune(self.state_, tokens, config)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        data = check_dataset(X, self.schema_)
        return ctr_logits(self.state_.tokens(data), self.state_, self.config_)

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int64)

    def score_auc(self, X) -> float:
        data = check_dataset(X, getattr(self, "schema_", None))
        return auc(self.decision_function(data), data.labels)

    def reconstruction_accuracy(self, X) -> dict:
        check_is_fitted(self, "state_")
        data = check_dataset(X, self.schema_)
        return reconstruction_report(self.state_, self.state_.tokens(data), self.config_)
