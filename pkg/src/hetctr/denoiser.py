"""Difficulty-guided denoising network.

Each of the ``N + 1`` field positions (label last) enters as its field
embedding (or mask embedding) plus a field-position embedding plus the
timestep embedding. ``L`` pre-norm blocks follow::

    x = x + W_O softmax(c * (W_Q LN(x)) (W_K LN(x))^T / sqrt(d)) W_V LN(x)
    x = x + MLP(LN(x))

where ``c_i = exp(-s_i / 2)`` for feature fields and 1 for the label. The
scoring head ``G`` is a final layer norm and a linear map applied to every
position; masked field ``i`` is scored against candidate embeddings by
cosine similarity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import TokenizedBatch
from .encode import encode_sequences, init_encoder_params, uniform_init
from .schema import DatasetSchema, FieldKind

MLP_WIDTH = 4


def init_params(schema: DatasetSchema, d: int = 16, n_layers: int = 2, T: int = 100, seed: int = 0) -> dict:
    """All network parameters (encoders included) as a flat name -> float64 array dict."""
    rng = np.random.default_rng([seed, 0xDE9015E])
    params = init_encoder_params(schema, d, rng)
    params["pos"] = uniform_init(rng, (len(schema.fields), d), d)
    params["time"] = uniform_init(rng, (T + 1, d), d)
    for layer in range(n_layers):
        pre = f"l{layer}."
        params[pre + "ln1.g"] = np.ones(d)
        params[pre + "ln1.b"] = np.zeros(d)
        for part in ("wq", "wk", "wv", "wo"):
            params[pre + part] = uniform_init(rng, (d, d), d)
        params[pre + "ln2.g"] = np.ones(d)
        params[pre + "ln2.b"] = np.zeros(d)
        params[pre + "w1"] = uniform_init(rng, (d, MLP_WIDTH * d), d)
        params[pre + "b1"] = np.zeros(MLP_WIDTH * d)
        params[pre + "w2"] = uniform_init(rng, (MLP_WIDTH * d, d), MLP_WIDTH * d)
        params[pre + "b2"] = np.zeros(d)
    params["lnf.g"] = np.ones(d)
    params["lnf.b"] = np.zeros(d)
    params["head.w"] = uniform_init(rng, (d, d), d)
    params["head.b"] = np.zeros(d)
    return params


def n_layers_of(params) -> int:
    return sum(1 for k in params if k.endswith(".wq") and k.startswith("l"))


def query_scale(s, n_fields):
    """``exp(-s/2)`` per feature field with the label pinned to 1; works on tensors and arrays."""
    if isinstance(s, ad.Tensor):
        return ad.concat([ad.exp(s * -0.5), ad.constant(np.ones(1))], axis=0)
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("difficulty parameters must be finite")
    if s.shape != (n_fields - 1,):
        raise ValueError(f"expected {n_fields - 1} difficulty parameters, got shape {s.shape}")
    return np.concatenate([np.exp(-s / 2.0), [1.0]])


def attention_block(x, P, layer: int, scale=None):
    """Pre-norm self-attention sub-block over field positions; returns (output, probabilities)."""
    pre = f"l{layer}."
    d = x.shape[-1]
    a = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
    q = a @ P[pre + "wq"]
    k = a @ P[pre + "wk"]
    v = a @ P[pre + "wv"]
    if scale is not None:
        q = q * (ad.reshape(scale, (-1, 1)) if isinstance(scale, ad.Tensor) else scale[:, None])
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    probs = ad.softmax(scores, axis=-1)
    return x + (probs @ v) @ P[pre + "wo"], probs


def mlp_block(x, P, layer: int):
    pre = f"l{layer}."
    b = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
    hidden = ad.relu(b @ P[pre + "w1"] + P[pre + "b1"])
    return x + hidden @ P[pre + "w2"] + P[pre + "b2"]


def difficulty_scaled_attention(hidden, s, layer_params: dict, layer: int = 0):
    """Numpy entry point to one attention sub-block.

    ``hidden`` is ``(N+1, d)`` or ``(n, N+1, d)``; ``s=None`` runs the
    unmodulated block. Returns ``(output, attention probabilities)``.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    scale = None if s is None else query_scale(s, hidden.shape[-2])
    P = {k: ad.constant(v) for k, v in layer_params.items()}
    out, probs = attention_block(ad.constant(hidden), P, layer, scale)
    return out.value, probs.value


@dataclass
class ForwardTrace:
    """Everything recorded by one forward pass; ``tape`` holds every activation."""

    tape: ad.Tape
    batch: TokenizedBatch
    params: dict  # name -> leaf tensor
    s: ad.Tensor | None
    ctx: ad.Tensor
    sequences: dict = field(default_factory=dict)  # field index -> (n, d) clean encodings
    attention: list = field(default_factory=list)
    modulated: bool = True

    @property
    def version(self):
        return self.tape.version

    def replay(self):
        """Recompute the forward pass from the recorded inputs; returns the context values."""
        values = {k: v.value for k, v in self.params.items()}
        s = None if self.s is None else self.s.value
        again = denoise_forward(self.batch, values, s, modulate=self.modulated)
        return again.ctx.value


def field_inputs(batch: TokenizedBatch, P: dict):
    """Per-position input embeddings (masked fields read their mask row) and clean sequence encodings."""
    schema = batch.schema
    inputs, sequences = [], {}
    for i, spec in enumerate(schema.fields):
        table = P[f"emb.{spec.name}"]
        if spec.kind is FieldKind.SEQUENCE:
            enc = encode_sequences(P, spec.name, batch.tokens[spec.name], spec.cardinality)
            sequences[i] = enc
            masked = batch.mask[:, i][:, None].astype(np.float64)
            mask_row = ad.take_rows(table, np.array([spec.cardinality]))
            inputs.append(enc * (1.0 - masked) + mask_row * masked)
        else:
            inputs.append(ad.take_rows(table, batch.inputs(i)))
    return inputs, sequences


def denoise_forward(batch: TokenizedBatch, params: dict, s=None, modulate: bool = True, version: int = 0) -> ForwardTrace:
    """Run the denoiser on a tokenized batch.

    ``params`` are numpy arrays; ``s`` the feature-field log-difficulties.
    With ``modulate=False`` (or ``s=None``) the queries are not rescaled.
    """
    schema = batch.schema
    n_fields = len(schema.fields)
    if batch.mask.shape[1] != n_fields:
        raise ValueError(f"mask has {batch.mask.shape[1]} columns, schema has {n_fields} fields")
    d = params["pos"].shape[1]
    tape = ad.Tape(version)
    with tape:
        P = {k: tape.leaf(k, v) for k, v in params.items()}
        s_leaf = None
        scale = None
        if s is not None:
            query_scale(s, n_fields)  # validates shape and finiteness
            s_leaf = tape.leaf("s", s)
            if modulate:
                scale = query_scale(s_leaf, n_fields)
        inputs, sequences = field_inputs(batch, P)
        x = ad.stack(inputs, axis=1) + P["pos"]
        x = x + ad.reshape(ad.take_rows(P["time"], batch.t), (len(batch), 1, d))
        attention = []
        for layer in range(n_layers_of(params)):
            x, probs = attention_block(x, P, layer, scale)
            attention.append(probs)
            x = mlp_block(x, P, layer)
        ctx = ad.layer_norm(x, P["lnf.g"], P["lnf.b"]) @ P["head.w"] + P["head.b"]
    return ForwardTrace(tape, batch, P, s_leaf, ctx, sequences, attention, modulated=scale is not None)


# --------------------------------------------------------------------------
# scoring


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return v / norm


def batch_softmax_logprob(context, positive, negatives) -> float:
    """``log softmax`` of the positive's cosine score against in-batch negatives."""
    if len(negatives) == 0:
        raise ValueError("need at least one negative")
    c = _unit(context)
    scores = np.array([c @ _unit(positive)] + [c @ _unit(neg) for neg in negatives])
    top = scores.max()
    return float(scores[0] - top - math.log(np.exp(scores - top).sum()))


def cosine_scores(context, candidates):
    """Tape op: ``(m, d) x (U, d) -> (m, U)`` cosine matrix."""
    return ad.l2_normalize(context, axis=-1) @ ad.swapaxes(ad.l2_normalize(candidates, axis=-1), -1, -2)


def candidate_set(trace: ForwardTrace, field_index: int):
    """Deduplicated in-batch candidates for a feature field: (embeddings tensor, positive index per row)."""
    batch = trace.batch
    spec = batch.schema.fields[field_index]
    tokens = batch.tokens[spec.name]
    if spec.kind is FieldKind.SEQUENCE:
        _, first, inverse = np.unique(tokens, axis=0, return_index=True, return_inverse=True)
        return ad.getitem(trace.sequences[field_index], first), inverse.reshape(-1)
    uniq, inverse = np.unique(tokens, return_inverse=True)
    return ad.take_rows(trace.params[f"emb.{spec.name}"], uniq), inverse.reshape(-1)


def field_nll(trace: ForwardTrace, field_index: int):
    """Mean negative log-probability over the masked rows of a field, or ``None`` if none are masked."""
    batch = trace.batch
    rows = np.flatnonzero(batch.mask[:, field_index])
    if rows.size == 0:
        return None
    spec = batch.schema.fields[field_index]
    if spec.kind is FieldKind.LABEL:
        candidates = ad.take_rows(trace.params[f"emb.{spec.name}"], np.arange(2))
        positive = batch.tokens[spec.name]
    else:
        candidates, positive = candidate_set(trace, field_index)
    ctx = ad.getitem(trace.ctx, (rows, field_index))
    logp = ad.log_softmax(cosine_scores(ctx, candidates), axis=-1)
    picked = ad.getitem(logp, (np.arange(rows.size), positive[rows]))
    return ad.mean(picked) * -1.0


def label_logit(trace: ForwardTrace):
    """``cos(G, e_{y=1}) - cos(G, e_{y=0})`` at the label position for every row."""
    schema = trace.batch.schema
    label = len(schema.fields) - 1
    ctx = ad.getitem(trace.ctx, (slice(None), label))
    table = trace.params[f"emb.{schema.label.name}"]
    scores = cosine_scores(ctx, ad.take_rows(table, np.arange(2)))
    return ad.getitem(scores, (slice(None), 1)) - ad.getitem(scores, (slice(None), 0))


def backward(trace: ForwardTrace, upstream: dict, current_version=None) -> dict:
    """Exact gradients of ``sum <upstream[T], T>`` for every parameter (and ``s``) of the trace."""
    return trace.tape.backward(upstream, current_version)
