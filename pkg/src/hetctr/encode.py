"""Type-specific field encoders.

Id, categorical, numerical (after binning) and label fields are embedding
lookups; every table carries one extra row at index ``V`` for the absorbing
mask token. Sequence fields run a one-block, one-head self-attention over
item embeddings, mean-pool the valid positions and apply a final linear
map. Their item table has two extra rows: ``V`` is the field-level mask
embedding and ``V + 1`` the padding token used for empty histories.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .schema import Dataset, DatasetSchema, FieldKind, RawSample, SchemaError

# additive key mask for padded positions; exp underflows to exactly 0
_NEG = -1e30


class CdfBinner(TransformerMixin, BaseEstimator):
    """Empirical-CDF binning: ``bin(v) = min(floor(B * F(v)), B - 1)``.

    ``F(v)`` is right-continuous, ``#{train <= v} / n``, so ties share a
    bin and values outside the training range clamp to the end bins.
    """

    def __init__(self, n_bins=100):
        self.n_bins = n_bins

    def fit(self, X, y=None):
        values = np.asarray(X, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise ValueError("cannot fit a binner on an empty sample")
        if not np.all(np.isfinite(values)):
            raise ValueError("binner training values must be finite")
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
        self.sorted_values_ = np.sort(values)
        return self

    def transform(self, X):
        check_is_fitted(self, "sorted_values_")
        values = np.asarray(X, dtype=np.float64)
        n = len(self.sorted_values_)
        counts = np.searchsorted(self.sorted_values_, values, side="right")
        # integer arithmetic keeps floor(B * count / n) exact
        return np.minimum((self.n_bins * counts) // n, self.n_bins - 1).astype(np.int64)

    def to_state(self):
        return {"n_bins": int(self.n_bins), "sorted_values": self.sorted_values_}

    @classmethod
    def from_state(cls, state):
        binner = cls(int(state["n_bins"]))
        binner.sorted_values_ = np.asarray(state["sorted_values"], dtype=np.float64)
        return binner


def fit_binner(values, n_bins) -> CdfBinner:
    return CdfBinner(n_bins).fit(values)


def fit_binners(data: Dataset) -> dict:
    return {
        f.name: fit_binner(data.columns[f.name], f.cardinality)
        for f in data.schema.features
        if f.kind is FieldKind.NUMERICAL
    }


def tokenize(data: Dataset, binners: dict) -> dict:
    """Map raw columns to token arrays: bins for numerical, -1 padded rows for sequences."""
    out = {}
    for f in data.schema.fields:
        col = data.columns[f.name]
        if f.kind is FieldKind.NUMERICAL:
            out[f.name] = binners[f.name].transform(col)
        else:
            out[f.name] = np.asarray(col, dtype=np.int64)
    return out


# --------------------------------------------------------------------------
# parameters


def uniform_init(rng, shape, d):
    bound = 1.0 / math.sqrt(d)
    return rng.uniform(-bound, bound, size=shape)


def table_rows(spec) -> int:
    """Rows of a field's embedding table: vocabulary, mask token, and a pad row for sequences."""
    return spec.cardinality + (2 if spec.kind is FieldKind.SEQUENCE else 1)


def init_encoder_params(schema: DatasetSchema, d: int, rng) -> dict:
    params = {}
    for f in schema.fields:
        params[f"emb.{f.name}"] = uniform_init(rng, (table_rows(f), d), d)
        if f.kind is FieldKind.SEQUENCE:
            for part in ("wq", "wk", "wv", "wo", "wp"):
                params[f"seq.{f.name}.{part}"] = uniform_init(rng, (d, d), d)
            params[f"seq.{f.name}.bp"] = np.zeros(d)
    return params


# --------------------------------------------------------------------------
# sequence encoder


def sequence_inputs(tokens: np.ndarray, vocab: int):
    """Replace padding, give empty rows a single pad token; returns (ids, valid mask)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    valid = tokens >= 0
    empty = ~valid.any(axis=1)
    ids = np.where(valid, tokens, vocab + 1)
    valid = valid.copy()
    valid[empty, 0] = True
    return ids, valid


def encode_sequences(P: dict, name: str, tokens: np.ndarray, vocab: int):
    """Batched sequence encoder on the tape: ``(n, L)`` padded ids -> ``(n, d)``."""
    ids, valid = sequence_inputs(tokens, vocab)
    x = ad.take_rows(P[f"emb.{name}"], ids)
    d = x.shape[-1]
    q = x @ P[f"seq.{name}.wq"]
    k = x @ P[f"seq.{name}.wk"]
    v = x @ P[f"seq.{name}.wv"]
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    scores = scores + np.where(valid[:, None, :], 0.0, _NEG)
    attn = ad.softmax(scores, axis=-1)
    block = x + (attn @ v) @ P[f"seq.{name}.wo"]
    weights = valid / valid.sum(axis=1, keepdims=True)
    pooled = ad.sum(block * weights[:, :, None], axis=1)
    return pooled @ P[f"seq.{name}.wp"] + P[f"seq.{name}.bp"]


def encode_sequence(tokens, params: dict, name: str, vocab: int) -> np.ndarray:
    """Encode one history (list of item ids) with numpy parameters; returns a d-vector."""
    tokens = [int(t) for t in tokens]
    if any(t < 0 or t >= vocab for t in tokens):
        raise SchemaError(f"item id out of vocabulary in sequence field {name!r}")
    row = np.asarray(tokens if tokens else [-1], dtype=np.int64)[None, :]
    P = {k: ad.constant(v) for k, v in params.items()}
    return encode_sequences(P, name, row, vocab).value[0]


def embed_field(sample: RawSample, field_index: int, schema: DatasetSchema, params: dict, binners: dict):
    """Type-dispatched d-vector for one field of one sample (unmasked)."""
    spec = schema.fields[field_index]
    table = params[f"emb.{spec.name}"]
    if spec.kind is FieldKind.LABEL:
        token = int(sample.label)
    elif spec.kind is FieldKind.SEQUENCE:
        return encode_sequence(sample.features[spec.name], params, spec.name, spec.cardinality)
    elif spec.kind is FieldKind.NUMERICAL:
        token = int(binners[spec.name].transform([sample.features[spec.name]])[0])
    else:
        token = int(sample.features[spec.name])
    if not 0 <= token < spec.cardinality:
        raise SchemaError(f"token {token} out of vocabulary for field {spec.name!r}")
    return table[token].copy()
