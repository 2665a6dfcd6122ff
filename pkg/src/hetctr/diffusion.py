"""Absorbing-state forward process with per-field cosine schedules.

Field ``i`` is replaced by its mask token with probability

    gamma_i(t) = (1 - cos(pi * t / (2T))) ** kappa_i,
    kappa_i    = 1 + ln(V_i) / ln(V_max),

so wider vocabularies mask more slowly. Masking is per field and
independent across fields given ``t``; sequence fields are masked as a
whole.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schema import DatasetSchema


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kappa: tuple  # one exponent per field, label included

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if any(k < 1 for k in self.kappa):
            raise ValueError("schedule exponents must be >= 1")

    @classmethod
    def for_schema(cls, schema: DatasetSchema, T: int = 100) -> "NoiseSchedule":
        log_vmax = max(math.log(f.cardinality) for f in schema.fields)
        return cls(T, tuple(1.0 + math.log(f.cardinality) / log_vmax for f in schema.fields))

    def rates(self, t) -> np.ndarray:
        """Masking probability of every field at (integer) time ``t``; shape ``(..., n_fields)``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")
        base = 1.0 - np.cos(np.pi * t / (2.0 * self.T))
        out = np.asarray(base, dtype=np.float64)[..., None] ** np.asarray(self.kappa)
        # pin the endpoints; cos(pi/2) is only ~6e-17 in floating point
        out = np.where(np.asarray(t)[..., None] == self.T, 1.0, out)
        return out

    def to_dict(self):
        return {"T": self.T, "kappa": list(self.kappa)}


def schedule_value(schedule: NoiseSchedule, field_index: int, t: int) -> float:
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    return float(schedule.rates(t)[field_index])


def sample_timestep(rng, T: int) -> int:
    if T < 1:
        raise ValueError("T must be >= 1")
    return int(rng.integers(1, T + 1))


@dataclass
class TokenizedBatch:
    """Tokens of a batch at diffusion time ``t``.

    ``tokens`` keeps the original (clean) values per field name; ``mask``
    is ``(n, n_fields)`` with the label in the last column. Masked
    positions read the field's mask row ``V_i`` (see :meth:`inputs`).
    """

    schema: DatasetSchema
    tokens: dict
    mask: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.t)

    def inputs(self, field_index: int) -> np.ndarray:
        """Input token ids for a non-sequence field, masked entries replaced by ``V_i``."""
        spec = self.schema.fields[field_index]
        return np.where(self.mask[:, field_index], spec.cardinality, self.tokens[spec.name])


MODES = ("joint", "ctr")


def forward_mask(tokens: dict, schema: DatasetSchema, schedule: NoiseSchedule, t, rng, mode="joint") -> TokenizedBatch:
    """Sample ``x_t`` for a batch of clean tokens.

    ``joint``: every field, label included, is masked independently with
    its own ``gamma_i(t)``. ``ctr``: features are kept, the label is always
    masked.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n = len(tokens[schema.label.name])
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,)).copy()
    if mode == "ctr":
        mask = np.zeros((n, len(schema.fields)), dtype=bool)
        mask[:, -1] = True
    else:
        mask = rng.random((n, len(schema.fields))) < schedule.rates(t)
    return TokenizedBatch(schema, tokens, mask, t)


def slice_tokens(tokens: dict, index) -> dict:
    return {k: v[index] for k, v in tokens.items()}
