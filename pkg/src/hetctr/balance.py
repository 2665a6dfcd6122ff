"""Uncertainty-weighted aggregation of per-field reconstruction losses.

With log-variance ``s_i`` per feature field the objective is

    L_bal = sum_i exp(-s_i) * l_i + s_i / 2,

strictly convex in each ``s_i`` with minimiser ``s_i* = log(2 l_i)``.
Fields that were not masked in a batch carry ``nan`` and are left out of
both terms for that step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ABSENT = np.nan


@dataclass
class FieldLosses:
    """Per-field batch losses; ``nan`` marks a field with no masked occurrence."""

    values: np.ndarray
    label: float = ABSENT

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)


def field_losses(nll_terms, label_term=None) -> FieldLosses:
    """Collect tape terms (or floats, ``None`` for absent) into a :class:`FieldLosses`."""

    def value(term):
        if term is None:
            return ABSENT
        return float(term.value) if isinstance(term, ad.Tensor) else float(term)

    return FieldLosses(np.array([value(t) for t in nll_terms]), value(label_term))


def self_balancing_loss(losses: FieldLosses, s) -> float:
    s = np.asarray(s, dtype=np.float64)
    keep = losses.present
    total = float(np.sum(np.exp(-s[keep]) * losses.values[keep] + s[keep] / 2.0))
    if not np.isnan(losses.label):
        total += losses.label
    return total


def grad_s(losses, s) -> np.ndarray:
    """Loss-path gradient ``1/2 - exp(-s) * l`` (zero for absent fields)."""
    values = losses.values if isinstance(losses, FieldLosses) else np.asarray(losses, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    g = 0.5 - np.exp(-s) * values
    return np.where(np.isnan(values), 0.0, g)


def second_derivative_s(loss, s):
    return np.exp(-np.asarray(s, dtype=np.float64)) * np.asarray(loss, dtype=np.float64)


def equilibrium_s(loss):
    loss = np.asarray(loss, dtype=np.float64)
    if np.any(loss <= 0):
        raise ValueError("equilibrium needs a strictly positive loss")
    out = np.log(2.0 * loss)
    return float(out) if out.ndim == 0 else out


def converge_s(loss, s0, lr, steps) -> np.ndarray:
    """Plain gradient descent on ``s`` with ``loss`` held fixed; returns ``steps + 1`` iterates."""
    loss = np.asarray(loss, dtype=np.float64)
    s = np.array(s0, dtype=np.float64)
    path = [s.copy()]
    for _ in range(steps):
        s = s - lr * (0.5 - np.exp(-s) * loss)
        path.append(s.copy())
    return np.array(path)


def normalized_difficulty(loss, reference) -> np.ndarray:
    if reference is None:
        raise ValueError("reference losses have not been recorded yet")
    reference = np.asarray(reference, dtype=np.float64)
    if np.any(~(reference > 0)):
        raise ValueError("reference losses must be positive")
    return np.asarray(loss, dtype=np.float64) / reference


def loss_weights(s) -> np.ndarray:
    return np.exp(-np.asarray(s, dtype=np.float64))


def sigma(s) -> np.ndarray:
    """Per-field standard deviation implied by ``s = log sigma^2`` (read-only view for logs)."""
    return np.exp(np.asarray(s, dtype=np.float64) / 2.0)


def objective(nll_terms, label_term, s_leaf=None):
    """Tape objective: balanced when ``s_leaf`` is given, otherwise the plain sum.

    ``nll_terms`` holds one tensor or ``None`` per feature field; the label
    term always enters with weight 1.
    """
    parts = []
    for i, term in enumerate(nll_terms):
        if term is None:
            continue
        if s_leaf is None:
            parts.append(term)
        else:
            s_i = ad.getitem(s_leaf, i)
            parts.append(ad.exp(s_i * -1.0) * term + s_i * 0.5)
    if label_term is not None:
        parts.append(label_term)
    if not parts:
        return ad.constant(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


class DifficultyTracker:
    """Accumulates per-field epoch means; the first completed epoch becomes the reference."""

    def __init__(self, n_fields: int):
        self.n_fields = n_fields
        self.reference = None
        self.reset_epoch()

    def reset_epoch(self):
        self.sum = np.zeros(self.n_fields)
        self.count = np.zeros(self.n_fields)

    def update(self, losses: FieldLosses):
        keep = losses.present
        self.sum[keep] += losses.values[keep]
        self.count[keep] += 1

    def epoch_mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.sum / np.maximum(self.count, 1), np.nan)

    def end_epoch(self) -> np.ndarray:
        mean = self.epoch_mean()
        if self.reference is None and np.all(self.count > 0):
            self.reference = mean.copy()
        self.reset_epoch()
        return mean

    def difficulty(self, losses) -> np.ndarray:
        if self.reference is None:
            return np.full(self.n_fields, np.nan)
        return normalized_difficulty(losses, self.reference)

    def state(self):
        return {
            "sum": self.sum.copy(),
            "count": self.count.copy(),
            "reference": None if self.reference is None else self.reference.copy(),
        }

    def load(self, state):
        self.sum = np.asarray(state["sum"], dtype=np.float64).copy()
        self.count = np.asarray(state["count"], dtype=np.float64).copy()
        ref = state.get("reference")
        self.reference = None if ref is None else np.asarray(ref, dtype=np.float64).copy()
