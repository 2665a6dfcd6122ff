"""Heterogeneous field schemas and a synthetic latent-factor CTR generator.

Every sample draws a hidden vector ``z ~ N(0, I)``. Each feature field is a
noisy function of ``z`` whose conditional entropy given ``z`` is calibrated
to the field's ``planted_entropy``:

* Id / Categorical: ``p(v | z) = softmax(beta * W z + bias)`` over random
  unit prototypes ``W``; ``beta`` is solved so the expected entropy
  matches. Id fields carry a Zipf log-popularity ``bias`` (partially
  weighted when the target entropy exceeds the prior's own entropy), which
  gives a long tail of rarely seen ids.
* Numerical: ``v = <w, z> + sigma * eps`` with ``sigma`` solved against the
  entropy of the value's equiprobable ``B``-bin discretisation; the raw
  value is ``exp(v)``.
* Sequence: a first-order Markov walk over the item vocabulary; each fresh
  item is drawn from the field's ``p(. | z)``, otherwise the walk steps to
  the next item id.
* Label: ``1[<u, z> + b > 0]`` flipped with probability ``label_noise``.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy import optimize, special, stats


class FieldKind(str, enum.Enum):
    ID = "id"
    CATEGORICAL = "categorical"
    NUMERICAL = "numerical"
    SEQUENCE = "sequence"
    LABEL = "label"


FEATURE_KINDS = (FieldKind.ID, FieldKind.CATEGORICAL, FieldKind.NUMERICAL, FieldKind.SEQUENCE)

# default planted entropy as a fraction of ln(V), per kind
_DEFAULT_ENTROPY_FRACTION = {
    FieldKind.ID: 0.5,
    FieldKind.CATEGORICAL: 0.3,
    FieldKind.NUMERICAL: 0.4,
    FieldKind.SEQUENCE: 0.5,
    FieldKind.LABEL: 0.0,
}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: FieldKind
    cardinality: int
    seq_len: int = 0
    planted_entropy: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FieldKind(self.kind))
        if self.cardinality < 2:
            raise SchemaError(f"field {self.name!r}: cardinality must be >= 2, got {self.cardinality}")
        if self.kind is FieldKind.SEQUENCE and self.seq_len < 1:
            raise SchemaError(f"sequence field {self.name!r} needs seq_len >= 1")
        if self.kind is not FieldKind.SEQUENCE and self.seq_len != 0:
            raise SchemaError(f"field {self.name!r}: seq_len only applies to sequence fields")
        if self.kind is FieldKind.LABEL and self.cardinality != 2:
            raise SchemaError("label field must have cardinality 2")
        if not 0.0 <= self.planted_entropy <= math.log(self.cardinality) + 1e-12:
            raise SchemaError(
                f"field {self.name!r}: planted_entropy {self.planted_entropy} outside [0, ln V]"
            )

    def to_dict(self):
        return {
            "name": self.name,
            "kind": self.kind.value,
            "cardinality": self.cardinality,
            "seq_len": self.seq_len,
            "planted_entropy": self.planted_entropy,
        }


@dataclass(frozen=True)
class DatasetSchema:
    fields: tuple[FieldSpec, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate field names: {dupes}")
        labels = [i for i, f in enumerate(self.fields) if f.kind is FieldKind.LABEL]
        if len(labels) != 1:
            raise SchemaError(f"schema needs exactly one label field, found {len(labels)}")
        if labels[0] != len(self.fields) - 1:
            raise SchemaError("label field must come last")
        if len(self.fields) < 2:
            raise SchemaError("schema needs at least one feature field")

    @property
    def features(self) -> tuple[FieldSpec, ...]:
        return self.fields[:-1]

    @property
    def label(self) -> FieldSpec:
        return self.fields[-1]

    @property
    def n_features(self) -> int:
        return len(self.fields) - 1

    def index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise KeyError(name)

    def indices_of(self, kind: FieldKind) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.kind is FieldKind(kind)]

    def to_dict(self):
        return {"seed": self.seed, "fields": [f.to_dict() for f in self.fields]}

    @classmethod
    def from_dict(cls, payload):
        return cls(tuple(FieldSpec(**f) for f in payload["fields"]), seed=int(payload["seed"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class RawSample(NamedTuple):
    """One row: ``features`` maps field name to its raw value."""

    features: dict
    label: int


@dataclass
class SyntheticConfig:
    n_samples: int = 20000
    planted_entropy: dict = field(default_factory=dict)
    label_noise: float = 0.1
    latent_dim: int = 8
    base_rate: float = 0.3
    # probability that a sequence walk steps to the next item id instead of redrawing
    seq_stay: float = 0.3
    # Zipf exponent of the popularity prior on Id fields (0 disables)
    id_zipf: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise SchemaError("n_samples must be >= 1")
        if not 0.0 <= self.label_noise <= 0.5:
            raise SchemaError("label_noise must lie in [0, 0.5]")
        if self.latent_dim < 1:
            raise SchemaError("latent_dim must be >= 1")
        if not 0.0 < self.base_rate < 1.0:
            raise SchemaError("base_rate must lie in (0, 1)")


DEFAULT_BENCHMARK = (
    ("user_id", FieldKind.ID, 10000, 0),
    ("item_id", FieldKind.ID, 10000, 0),
    ("cat_0", FieldKind.CATEGORICAL, 20, 0),
    ("cat_1", FieldKind.CATEGORICAL, 20, 0),
    ("cat_2", FieldKind.CATEGORICAL, 20, 0),
    ("num_0", FieldKind.NUMERICAL, 100, 0),
    ("num_1", FieldKind.NUMERICAL, 100, 0),
    ("history", FieldKind.SEQUENCE, 10000, 20),
)

# The default fields plus a binary, noise-free categorical field; the
# easiest field any cosine-scored reconstruction can nearly saturate.
HETEROGENEITY_BENCHMARK = DEFAULT_BENCHMARK + (("cat_easy", FieldKind.CATEGORICAL, 2, 0),)


def heterogeneity_benchmark(seed: int = 0, n_samples: int = 20000, label_noise: float = 0.1, latent_dim: int = 2):
    """Schema and config of the planted-heterogeneity benchmark used for the A/B harness.

    A two-dimensional latent keeps cross-field structure learnable at
    desk-scale step budgets.
    """
    config = SyntheticConfig(
        n_samples=n_samples,
        label_noise=label_noise,
        latent_dim=latent_dim,
        planted_entropy={"cat_easy": 0.0},
    )
    return build_schema(config, HETEROGENEITY_BENCHMARK, seed=seed), config


def build_schema(config: SyntheticConfig, kinds=None, seed: int = 0) -> DatasetSchema:
    """Build a schema from ``(kind, V, seq_len)`` or ``(name, kind, V, seq_len)`` rows.

    ``kinds=None`` requests the default benchmark. A label field is
    appended. Planted entropies come from ``config.planted_entropy``
    (keyed by field name) or fall back to a per-kind fraction of ln V.
    """
    rows = DEFAULT_BENCHMARK if kinds is None else kinds
    counters: dict[FieldKind, int] = {}
    specs = []
    for row in rows:
        if isinstance(row, FieldSpec):
            specs.append(row)
            continue
        if len(row) == 4:
            name, kind, card, seq_len = row
            kind = FieldKind(kind)
        else:
            kind, card, seq_len = row
            kind = FieldKind(kind)
            n = counters.get(kind, 0)
            counters[kind] = n + 1
            name = f"{kind.value}_{n}"
        if kind is FieldKind.LABEL:
            raise SchemaError("the label field is appended automatically")
        entropy = config.planted_entropy.get(
            name, _DEFAULT_ENTROPY_FRACTION[kind] * math.log(card) if card >= 2 else 0.0
        )
        specs.append(FieldSpec(name, kind, int(card), int(seq_len), float(entropy)))
    specs.append(FieldSpec("label", FieldKind.LABEL, 2))
    schema = DatasetSchema(tuple(specs), seed=seed)
    if kinds is None:
        present = {f.kind for f in schema.features}
        missing = [k.value for k in FEATURE_KINDS if k not in present]
        if missing:
            raise SchemaError(f"default benchmark lacks kinds {missing}")
    return schema


# --------------------------------------------------------------------------
# dataset container


@dataclass
class Dataset:
    """Columnar storage. Sequences are ``(n, seq_len)`` int arrays padded with -1."""

    schema: DatasetSchema
    columns: dict
    latent: np.ndarray | None = None

    def __len__(self):
        return len(self.columns[self.schema.label.name])

    @property
    def labels(self) -> np.ndarray:
        return self.columns[self.schema.label.name]

    def __getitem__(self, i) -> RawSample:
        feats = {}
        for f in self.schema.features:
            col = self.columns[f.name]
            if f.kind is FieldKind.SEQUENCE:
                row = col[i]
                feats[f.name] = [int(v) for v in row[row >= 0]]
            elif f.kind is FieldKind.NUMERICAL:
                feats[f.name] = float(col[i])
            else:
                feats[f.name] = int(col[i])
        return RawSample(feats, int(self.labels[i]))

    def __iter__(self) -> Iterator[RawSample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        latent = None if self.latent is None else self.latent[index]
        return Dataset(self.schema, {k: v[index] for k, v in self.columns.items()}, latent)

    def split(self, test_fraction=0.2, seed=0):
        rng = np.random.default_rng([self.schema.seed, seed, 0x5EED])
        order = rng.permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.take(np.sort(order[n_test:])), self.take(np.sort(order[:n_test]))

    @classmethod
    def from_samples(cls, schema: DatasetSchema, samples: Sequence[RawSample]) -> "Dataset":
        columns = {}
        for f in schema.features:
            values = [s.features[f.name] for s in samples]
            if f.kind is FieldKind.SEQUENCE:
                arr = np.full((len(values), f.seq_len), -1, dtype=np.int64)
                for r, seq in enumerate(values):
                    arr[r, : len(seq)] = seq
                columns[f.name] = arr
            elif f.kind is FieldKind.NUMERICAL:
                columns[f.name] = np.asarray(values, dtype=np.float64)
            else:
                columns[f.name] = np.asarray(values, dtype=np.int64)
        columns[schema.label.name] = np.asarray([s.label for s in samples], dtype=np.int64)
        return cls(schema, columns)


def validate_dataset(data: Dataset, schema: DatasetSchema | None = None) -> Dataset:
    """Check token ranges and shapes against the schema; returns ``data``."""
    schema = schema or data.schema
    if schema.digest() != data.schema.digest():
        raise SchemaError("dataset was generated for a different schema")
    n = len(data)
    for f in schema.fields:
        if f.name not in data.columns:
            raise SchemaError(f"missing column {f.name!r}")
        col = data.columns[f.name]
        if len(col) != n:
            raise SchemaError(f"column {f.name!r} has {len(col)} rows, expected {n}")
        if f.kind is FieldKind.NUMERICAL:
            if not np.all(np.isfinite(col)):
                raise SchemaError(f"non-finite value in numerical field {f.name!r}")
            continue
        if f.kind is FieldKind.SEQUENCE:
            if col.ndim != 2 or col.shape[1] > f.seq_len:
                raise SchemaError(f"sequence field {f.name!r} longer than seq_len {f.seq_len}")
            valid = col[col >= 0]
            if np.any(col < -1):
                raise SchemaError(f"bad padding in sequence field {f.name!r}")
        else:
            valid = col
        if valid.size and (valid.min() < 0 or valid.max() >= f.cardinality):
            raise SchemaError(f"token out of vocabulary in field {f.name!r}")
    return data


# --------------------------------------------------------------------------
# latent-factor model


def _softmax_rows(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _mean_entropy(protos, beta, z, bias=None, chunk=512):
    total = 0.0
    for lo in range(0, len(z), chunk):
        logits = beta * (z[lo : lo + chunk] @ protos.T)
        if bias is not None:
            logits = logits + bias
        lse = special.logsumexp(logits, axis=1, keepdims=True)
        logp = logits - lse
        total += float(-(np.exp(logp) * logp).sum())
    return total / len(z)


def _entropy_of(logits):
    logp = logits - special.logsumexp(logits)
    return float(-(np.exp(logp) * logp).sum())


def _calibrate_bias(log_pop, target):
    """Weight in [0, 1] on the popularity prior so its entropy equals ``target``."""
    if target >= _entropy_of(np.zeros_like(log_pop)) - 1e-12:
        return 0.0
    if target <= _entropy_of(log_pop):
        return 1.0
    return optimize.brentq(lambda a: _entropy_of(a * log_pop) - target, 0.0, 1.0, xtol=1e-10)


def _calibrate_beta(protos, target, z, bias=None):
    """Solve E_z[H(softmax(beta W z + bias))] = target for beta >= 0."""
    if target >= _mean_entropy(protos, 0.0, z[:1], bias) - 1e-12:
        return 0.0
    if target <= 0.0:
        return math.inf

    def gap(log_beta):
        return _mean_entropy(protos, math.exp(log_beta), z, bias) - target

    lo, hi = -8.0, 2.0
    while gap(hi) > 0:
        hi += 2.0
        if hi > 12:
            return math.exp(hi)
    return math.exp(optimize.brentq(gap, lo, hi, xtol=1e-6))


def _bin_edges(bins, scale):
    qs = np.arange(1, bins) / bins
    return stats.norm.ppf(qs) * scale


def _bin_probs(mu, sigma, edges):
    cdf = special.ndtr((edges[None, :] - mu[:, None]) / sigma)
    cdf = np.concatenate([np.zeros((len(mu), 1)), cdf, np.ones((len(mu), 1))], axis=1)
    return np.diff(cdf, axis=1)


def _numerical_entropy(sigma, bins, z_proj):
    edges = _bin_edges(bins, math.sqrt(1.0 + sigma**2))
    p = _bin_probs(z_proj, sigma, edges)
    return float(-special.xlogy(p, p).sum(axis=1).mean())


def _calibrate_sigma(bins, target, z_proj):
    if target <= 0.0:
        return 0.0
    if target >= math.log(bins) - 1e-12:
        return math.inf

    def gap(log_sigma):
        return _numerical_entropy(math.exp(log_sigma), bins, z_proj) - target

    return math.exp(optimize.brentq(gap, -12.0, 8.0, xtol=1e-8))


@dataclass
class _FieldModel:
    spec: FieldSpec
    direction: np.ndarray  # prototypes (V, D) or projection (D,)
    sharpness: float  # beta for discrete fields, sigma for numerical
    bias: np.ndarray | None = None  # log-popularity prior (Id fields)


@dataclass
class PlantedModel:
    schema: DatasetSchema
    config: SyntheticConfig
    fields: list
    label_direction: np.ndarray
    label_offset: float

    def log_weights(self, index: int, z: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Unnormalised log-probabilities of a discrete field's values given ``z``."""
        fm = self.fields[index]
        logits = z.astype(dtype) @ fm.direction.T.astype(dtype)
        logits *= dtype(fm.sharpness)
        if fm.bias is not None:
            logits += fm.bias.astype(dtype)
        return logits

    def conditional(self, index: int, z: np.ndarray) -> np.ndarray:
        """``p(value | z)`` for feature field ``index`` (bins for numerical, items for sequences)."""
        fm = self.fields[index]
        kind = fm.spec.kind
        if kind is FieldKind.NUMERICAL:
            mu = z @ fm.direction
            if math.isinf(fm.sharpness):
                return np.full((len(z), fm.spec.cardinality), 1.0 / fm.spec.cardinality)
            if fm.sharpness == 0.0:
                edges = _bin_edges(fm.spec.cardinality, 1.0)
                out = np.zeros((len(z), fm.spec.cardinality))
                out[np.arange(len(z)), np.searchsorted(edges, mu, side="right")] = 1.0
                return out
            edges = _bin_edges(fm.spec.cardinality, math.sqrt(1.0 + fm.sharpness**2))
            return _bin_probs(mu, fm.sharpness, edges)
        if math.isinf(fm.sharpness):
            scores = z @ fm.direction.T
            out = np.zeros_like(scores)
            out[np.arange(len(z)), scores.argmax(axis=1)] = 1.0
            return out
        return _softmax_rows(self.log_weights(index, z))

    def sample(self, index: int, z: np.ndarray, rng, size=None) -> np.ndarray:
        """Draw values of discrete field ``index`` given ``z``; ``size`` draws per row if set."""
        fm = self.fields[index]
        if math.isinf(fm.sharpness):
            picked = (z @ fm.direction.T).argmax(axis=1)
            return picked if size is None else np.repeat(picked[:, None], size, axis=1)
        # float32 halves memory traffic on wide vocabularies; draws only need ~1e-7 precision
        return _sample_rows(self.log_weights(index, z, np.float32), rng, size)


def _field_streams(schema: DatasetSchema, purpose: int):
    root = np.random.SeedSequence([schema.seed & 0xFFFFFFFFFFFFFFFF, purpose])
    return [np.random.default_rng(s) for s in root.spawn(len(schema.fields) + 1)]


_MODEL_CACHE: dict = {}


def planted_model(schema: DatasetSchema, config: SyntheticConfig) -> PlantedModel:
    """Draw the hidden generative model; a pure function of (schema, config)."""
    key = (schema.digest(), json.dumps(asdict(config), sort_keys=True))
    if key not in _MODEL_CACHE:
        if len(_MODEL_CACHE) > 16:
            _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = _draw_planted_model(schema, config)
    return _MODEL_CACHE[key]


def _draw_planted_model(schema: DatasetSchema, config: SyntheticConfig) -> PlantedModel:
    dim = config.latent_dim
    streams = _field_streams(schema, purpose=1)
    fields = []
    for i, spec in enumerate(schema.features):
        rng = streams[i]
        calib = rng.standard_normal((4096 if spec.cardinality <= 256 else 512, dim))
        if spec.kind is FieldKind.NUMERICAL:
            w = rng.standard_normal(dim)
            w /= np.linalg.norm(w)
            sharp = _calibrate_sigma(spec.cardinality, spec.planted_entropy, calib @ w)
            fields.append(_FieldModel(spec, w, sharp))
        else:
            protos = rng.standard_normal((spec.cardinality, dim))
            protos /= np.linalg.norm(protos, axis=1, keepdims=True)
            bias = None
            if spec.kind is FieldKind.ID and config.id_zipf > 0:
                log_pop = -config.id_zipf * np.log(rng.permutation(spec.cardinality) + 1.0)
                weight = _calibrate_bias(log_pop, spec.planted_entropy)
                bias = weight * log_pop if weight > 0 else None
            sharp = _calibrate_beta(protos, spec.planted_entropy, calib, bias)
            fields.append(_FieldModel(spec, protos, sharp, bias))
    u = streams[-1].standard_normal(dim)
    u /= np.linalg.norm(u)
    return PlantedModel(schema, config, fields, u, float(stats.norm.ppf(config.base_rate)))


def _sample_rows(logits, rng, size=None):
    """Inverse-CDF draws from each row of ``softmax(logits)``; consumes ``logits``."""
    rows, width = logits.shape
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    cdf = np.cumsum(logits, axis=1, dtype=np.float64)
    cdf /= cdf[:, -1:]
    # shift row r into [r, r + 1] so a single searchsorted serves every row
    cdf += np.arange(rows, dtype=np.float64)[:, None]
    draws = 1 if size is None else size
    u = rng.random((rows, draws)) + np.arange(rows, dtype=np.float64)[:, None]
    flat = np.searchsorted(cdf.reshape(-1), u.reshape(-1), side="left")
    picked = np.minimum(flat.reshape(rows, draws) - np.arange(rows)[:, None] * width, width - 1)
    return picked[:, 0] if size is None else picked


# rows per sampling block; fixed because it sets the order in which random draws are consumed
_CHUNK = 128


def generate_dataset(schema: DatasetSchema, config: SyntheticConfig) -> Dataset:
    """Sample ``config.n_samples`` rows from the planted model; deterministic in ``schema.seed``."""
    chunk = _CHUNK
    model = planted_model(schema, config)
    n, dim = config.n_samples, config.latent_dim
    streams = _field_streams(schema, purpose=2)
    z = streams[-1].standard_normal((n, dim))
    columns = {}
    for i, spec in enumerate(schema.features):
        rng = streams[i]
        fm = model.fields[i]
        if spec.kind is FieldKind.NUMERICAL:
            mu = z @ fm.direction
            if math.isinf(fm.sharpness):
                latent_value = rng.standard_normal(n)
            else:
                latent_value = mu + fm.sharpness * rng.standard_normal(n)
            columns[spec.name] = np.exp(latent_value)
            continue
        if spec.kind is FieldKind.SEQUENCE:
            seq = np.full((n, spec.seq_len), -1, dtype=np.int64)
            lengths = rng.integers(1, spec.seq_len + 1, size=n)
            for lo in range(0, n, chunk):
                fresh = model.sample(i, z[lo : lo + chunk], rng, size=spec.seq_len)
                stay = rng.random((len(fresh), spec.seq_len)) < config.seq_stay
                walk = fresh.copy()
                for t in range(1, spec.seq_len):
                    walk[:, t] = np.where(stay[:, t], (walk[:, t - 1] + 1) % spec.cardinality, fresh[:, t])
                keep = np.arange(spec.seq_len)[None, :] < lengths[lo : lo + chunk, None]
                seq[lo : lo + chunk] = np.where(keep, walk, -1)
            columns[spec.name] = seq
            continue
        out = np.empty(n, dtype=np.int64)
        for lo in range(0, n, chunk):
            out[lo : lo + chunk] = model.sample(i, z[lo : lo + chunk], rng)
        columns[spec.name] = out
    label_rng = streams[len(schema.features)]
    clean = (z @ model.label_direction + model.label_offset > 0).astype(np.int64)
    flip = label_rng.random(n) < config.label_noise
    columns[schema.label.name] = np.where(flip, 1 - clean, clean)
    return Dataset(schema, columns, latent=z)


def bayes_oracle_accuracy(
    schema: DatasetSchema, config: SyntheticConfig, field_index: int, n_draws: int = 100_000, seed: int = 0
) -> float:
    """Best reconstruction accuracy for a feature field when the latent factor is known.

    Monte-Carlo estimate of ``E_z[max_v p(v | z)]`` under the planted model.
    Numerical fields are scored on their equiprobable bins; sequence
    fields on a single freshly drawn item.
    """
    if not 0 <= field_index < schema.n_features:
        raise SchemaError(f"field {field_index} is not a feature field")
    model = planted_model(schema, config)
    rng = np.random.default_rng([seed, 0x0AC1E])
    total = 0.0
    chunk = max(1, min(n_draws, 2_000_000 // schema.fields[field_index].cardinality))
    for lo in range(0, n_draws, chunk):
        z = rng.standard_normal((min(chunk, n_draws - lo), config.latent_dim))
        total += float(model.conditional(field_index, z).max(axis=1).sum())
    return total / n_draws


def conditional_entropy_estimate(data: Dataset, config: SyntheticConfig, field_index: int) -> float:
    """Plug-in estimate of H(field | z): mean of -log p(observed value | z) over the dataset."""
    if data.latent is None:
        raise SchemaError("dataset carries no latent factors")
    spec = data.schema.features[field_index]
    model = planted_model(data.schema, config)
    values = data.columns[spec.name]
    if spec.kind is FieldKind.SEQUENCE:
        values = values[:, 0]
    if spec.kind is FieldKind.NUMERICAL:
        fm = model.fields[field_index]
        scale = math.sqrt(1.0 + fm.sharpness**2) if math.isfinite(fm.sharpness) else 1.0
        values = np.searchsorted(_bin_edges(spec.cardinality, scale), np.log(values), side="right")
    total = 0.0
    for lo in range(0, len(values), 4096):
        p = model.conditional(field_index, data.latent[lo : lo + 4096])
        picked = p[np.arange(len(p)), values[lo : lo + 4096]]
        total += float(-np.log(np.maximum(picked, 1e-300)).sum())
    return total / len(values)


# --------------------------------------------------------------------------
# text serialisation


def save_dataset(data: Dataset, path) -> None:
    """Write ``path`` (tab-separated rows, label last) and ``path.schema.json``."""
    path = Path(path)
    schema = data.schema
    lines = []
    for i in range(len(data)):
        cells = []
        for f in schema.features:
            value = data.columns[f.name][i]
            if f.kind is FieldKind.SEQUENCE:
                cells.append(",".join(str(int(v)) for v in value[value >= 0]))
            elif f.kind is FieldKind.NUMERICAL:
                cells.append(repr(float(value)))
            else:
                cells.append(str(int(value)))
        cells.append(str(int(data.labels[i])))
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n")
    schema_path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n")


def schema_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".schema.json")


def load_dataset(path) -> Dataset:
    path = Path(path)
    schema = DatasetSchema.from_dict(json.loads(schema_path(path).read_text()))
    samples = []
    for line in path.read_text().splitlines():
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != len(schema.fields):
            raise SchemaError(f"expected {len(schema.fields)} cells, got {len(cells)}")
        feats = {}
        for f, cell in zip(schema.features, cells):
            if f.kind is FieldKind.SEQUENCE:
                feats[f.name] = [int(v) for v in cell.split(",")] if cell else []
            elif f.kind is FieldKind.NUMERICAL:
                feats[f.name] = float(cell)
            else:
                feats[f.name] = int(cell)
        samples.append(RawSample(feats, int(cells[-1])))
    return validate_dataset(Dataset.from_samples(schema, samples))


def with_entropies(schema: DatasetSchema, entropies: dict) -> DatasetSchema:
    """Copy of ``schema`` with the named fields' planted entropies replaced."""
    fields = tuple(
        replace(f, planted_entropy=float(entropies[f.name])) if f.name in entropies else f
        for f in schema.fields
    )
    return DatasetSchema(fields, seed=schema.seed)
