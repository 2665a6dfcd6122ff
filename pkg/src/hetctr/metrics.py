"""AUC, log loss, per-field reconstruction accuracy and user-activity strata."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata, spearmanr

from . import autodiff as ad
from .denoiser import cosine_scores, denoise_forward
from .diffusion import TokenizedBatch, slice_tokens
from .encode import encode_sequences
from .schema import DatasetSchema, FieldKind

EPS = 1e-7
STRATA = (("cold", 0, 10), ("medium", 10, 101), ("active", 101, None))


def _binary(labels):
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney statistic with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if scores.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels, eps: float = EPS) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    y = _binary(labels)
    return float(np.mean(-y * np.log(p) - (1 - y) * np.log1p(-p)))


def user_strata(train_users, eval_users) -> np.ndarray:
    """Label every eval row cold/medium/active by its user's training-row count."""
    counts = dict(zip(*np.unique(np.asarray(train_users), return_counts=True)))
    n = np.array([counts.get(u, 0) for u in np.asarray(eval_users)])
    out = np.empty(n.shape, dtype=object)
    for name, lo, hi in STRATA:
        out[(n >= lo) & (n < (hi if hi is not None else np.inf))] = name
    return out


def stratified_auc(scores, labels, keys) -> dict:
    """AUC per stratum key; strata holding a single class are skipped with a warning."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    keys = np.asarray(keys)
    out = {}
    for key in sorted(set(keys.tolist()), key=str):
        rows = keys == key
        if len(set(y[rows].tolist())) < 2:
            warnings.warn(f"stratum {key!r} holds a single class; omitted", RuntimeWarning, stacklevel=2)
            continue
        out[key] = auc(scores[rows], y[rows])
    return out


def spearman_weights(s, final_losses) -> float:
    """Rank correlation between loss weights exp(-s) and inverse final losses."""
    rho = spearmanr(np.exp(-np.asarray(s, dtype=np.float64)), 1.0 / np.asarray(final_losses, dtype=np.float64))
    return float(rho.statistic)


# --------------------------------------------------------------------------
# reconstruction


@dataclass
class CandidatePool:
    field_index: int
    values: np.ndarray  # token ids, or (K, L) padded sequences

    def __len__(self):
        return len(self.values)


def draw_pool(tokens: dict, schema: DatasetSchema, field_index: int, size: int = 256, seed: int = 0) -> CandidatePool:
    """Up to ``size`` distinct values of a field, drawn once from the evaluation tokens."""
    spec = schema.fields[field_index]
    column = tokens[spec.name]
    if spec.kind is FieldKind.SEQUENCE:
        distinct = np.unique(column, axis=0)
    else:
        distinct = np.unique(column)
    rng = np.random.default_rng([seed, field_index, 0x9001])
    if len(distinct) > size:
        distinct = distinct[np.sort(rng.choice(len(distinct), size, replace=False))]
    return CandidatePool(field_index, distinct)


def _candidate_vectors(params, spec, values):
    if spec.kind is FieldKind.SEQUENCE:
        P = {k: ad.constant(v) for k, v in params.items() if k.startswith(("emb.", "seq."))}
        return encode_sequences(P, spec.name, values, spec.cardinality).value
    return params[f"emb.{spec.name}"][values]


def _unit_rows(m):
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return m / norm


def reconstruction_accuracy(state, tokens: dict, field_index: int, pool: CandidatePool, t: int, s=None, modulate=False, chunk=2048) -> float:
    """Fraction of rows whose true value outscores every other pool candidate with only this field masked."""
    if len(pool) == 0:
        raise ValueError("candidate pool is empty")
    schema = state.schema
    spec = schema.fields[field_index]
    params = state.params
    pool_vecs = _unit_rows(_candidate_vectors(params, spec, pool.values))
    is_seq = spec.kind is FieldKind.SEQUENCE
    n = len(tokens[schema.label.name])
    hits = 0
    for lo in range(0, n, chunk):
        part = slice_tokens(tokens, slice(lo, lo + chunk))
        m = len(part[schema.label.name])
        mask = np.zeros((m, len(schema.fields)), dtype=bool)
        mask[:, field_index] = True
        batch = TokenizedBatch(schema, part, mask, np.full(m, t, dtype=np.int64))
        trace = denoise_forward(batch, params, s, modulate=modulate)
        ctx = _unit_rows(trace.ctx.value[:, field_index])
        truth = part[spec.name]
        true_vecs = _unit_rows(trace.sequences[field_index].value if is_seq else params[f"emb.{spec.name}"][truth])
        true_score = np.einsum("nd,nd->n", ctx, true_vecs)
        scores = ctx @ pool_vecs.T
        if is_seq:
            same = np.all(truth[:, None, :] == pool.values[None, :, :], axis=-1)
        else:
            same = truth[:, None] == pool.values[None, :]
        scores = np.where(same, -np.inf, scores)
        hits += int(np.sum(true_score > scores.max(axis=1, initial=-np.inf)))
    return hits / n


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    auc: float
    logloss: float
    per_field_recon_acc: dict
    spearman_s_vs_invloss: float
    strata_auc: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc outside [0, 1]")
        if self.logloss < 0:
            raise ValueError("negative logloss")
        if any(not 0.0 <= a <= 1.0 for a in self.per_field_recon_acc.values()):
            raise ValueError("reconstruction accuracy outside [0, 1]")

    def to_dict(self):
        return _jsonable(asdict(self))

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_field_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["field", "recon_acc"])
            for name, acc in self.per_field_recon_acc.items():
                writer.writerow([name, repr(acc)])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
