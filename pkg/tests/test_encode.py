import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetctr import autodiff as ad
from hetctr.encode import (
    CdfBinner,
    embed_field,
    encode_sequence,
    encode_sequences,
    fit_binner,
    fit_binners,
    init_encoder_params,
    table_rows,
)
from hetctr.schema import FieldKind, RawSample, SchemaError, SyntheticConfig, build_schema
from conftest import finite_difference_check, small_dataset


def test_binner_examples():
    b = fit_binner(np.arange(1, 101), 10)
    assert b.transform([100])[0] == 9
    assert b.transform([1])[0] == 0
    assert b.transform([55])[0] == 5


def test_binner_matches_rank_counting(rng):
    values = rng.normal(size=257)
    b = fit_binner(values, 100)
    probes = np.concatenate([values[:50], rng.normal(size=50), [-10.0, 10.0]])
    for v in probes:
        count = sum(1 for x in values if x <= v)
        assert b.transform([v])[0] == min(math.floor(100 * count / 257), 99)


def test_binner_clamps_out_of_range():
    b = fit_binner([1.0, 2.0, 3.0], 3)
    assert b.transform([-1e9, 1e9]).tolist() == [0, 2]


def test_binner_rejects_empty():
    with pytest.raises(ValueError):
        fit_binner([], 10)


def test_binner_is_a_transformer():
    b = CdfBinner(n_bins=4)
    assert b.get_params() == {"n_bins": 4}
    out = b.fit_transform(np.array([3.0, 1.0, 2.0, 4.0]))
    assert out.tolist() == [3, 1, 2, 3]
    again = CdfBinner.from_state(b.to_state())
    assert np.array_equal(again.transform([2.5]), b.transform([2.5]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binner_monotone(seed):
    rng = np.random.default_rng(seed)
    b = fit_binner(rng.standard_cauchy(500), 100)
    a, c = rng.standard_cauchy(400), rng.standard_cauchy(400)
    lo, hi = np.minimum(a, c), np.maximum(a, c)
    bins_lo, bins_hi = b.transform(lo), b.transform(hi)
    assert np.all(bins_lo <= bins_hi)
    assert bins_lo.min() >= 0 and bins_hi.max() <= 99


def _seq_setup(d=8, vocab=30, seed=0):
    schema = build_schema(SyntheticConfig(), [("h", "sequence", vocab, 6)])
    params = init_encoder_params(schema, d, np.random.default_rng(seed))
    return schema, params


def _reference_sequence(tokens, params, name="h"):
    """Straight-line per-sequence encoder."""
    table = params[f"emb.{name}"]
    vocab = table.shape[0] - 2
    ids = list(tokens) if len(tokens) else [vocab + 1]
    x = table[ids]
    q, k, v = x @ params[f"seq.{name}.wq"], x @ params[f"seq.{name}.wk"], x @ params[f"seq.{name}.wv"]
    rows = []
    for i in range(len(ids)):
        scores = np.array([q[i] @ k[j] for j in range(len(ids))]) / math.sqrt(x.shape[1])
        w = np.exp(scores - scores.max())
        w = w / w.sum()
        rows.append(x[i] + (w @ v) @ params[f"seq.{name}.wo"])
    pooled = np.mean(rows, axis=0)
    return pooled @ params[f"seq.{name}.wp"] + params[f"seq.{name}.bp"]


def test_sequence_length_one_is_single_token_path():
    _, params = _seq_setup()
    e = params["emb.h"][7]
    by_hand = (e + (e @ params["seq.h.wv"]) @ params["seq.h.wo"]) @ params["seq.h.wp"] + params["seq.h.bp"]
    assert np.allclose(encode_sequence([7], params, "h", 30), by_hand, rtol=0, atol=1e-14)


def test_repeated_token_matches_single_token():
    _, params = _seq_setup()
    assert np.allclose(encode_sequence([4, 4], params, "h", 30), encode_sequence([4], params, "h", 30), atol=1e-14)


def test_sequence_matches_straight_line_reference(rng):
    _, params = _seq_setup()
    tokens = rng.integers(0, 30, size=5)
    assert np.max(np.abs(encode_sequence(tokens, params, "h", 30) - _reference_sequence(tokens, params))) < 1e-12


def test_empty_sequence_uses_padding_token():
    _, params = _seq_setup()
    out = encode_sequence([], params, "h", 30)
    assert np.allclose(out, _reference_sequence([], params), atol=1e-14)
    assert np.all(np.isfinite(out))


def test_batched_padding_matches_per_sequence(rng):
    _, params = _seq_setup()
    seqs = [[1, 2, 3], [5], [], [9, 9, 8, 7, 6, 5]]
    padded = np.full((4, 6), -1)
    for i, s in enumerate(seqs):
        padded[i, : len(s)] = s
    P = {k: ad.constant(v) for k, v in params.items()}
    batched = encode_sequences(P, "h", padded, 30).value
    for i, s in enumerate(seqs):
        assert np.allclose(batched[i], encode_sequence(s, params, "h", 30), atol=1e-13)


def test_out_of_vocabulary_sequence_rejected():
    _, params = _seq_setup()
    with pytest.raises(SchemaError):
        encode_sequence([30], params, "h", 30)


def test_sequence_encoder_gradients(rng):
    _, params = _seq_setup()
    padded = np.array([[1, 2, 3, -1], [4, -1, -1, -1], [-1, -1, -1, -1], [5, 6, 7, 8]])
    weights = rng.standard_normal((4, 8))

    def run(arrays):
        with ad.Tape() as tape:
            P = {k: tape.leaf(k, v) for k, v in arrays.items()}
            out = encode_sequences(P, "h", padded, 30)
        return tape, out

    tape, out = run(params)
    grads = tape.backward({out: weights})
    finite_difference_check(lambda a: float(np.sum(run(a)[1].value * weights)), params, grads, rng)


def test_table_rows_include_mask_and_padding():
    schema = build_schema(SyntheticConfig(), [("c", "categorical", 5, 0), ("h", "sequence", 9, 2)])
    assert [table_rows(f) for f in schema.fields] == [6, 11, 3]
    params = init_encoder_params(schema, 16, np.random.default_rng(0))
    bound = 1 / math.sqrt(16)
    assert all(np.abs(v).max() <= bound for k, v in params.items() if not k.endswith(".bp"))


def test_embed_field_dispatch():
    data = small_dataset(4, n=301)
    schema = data.schema
    binners = fit_binners(data)
    params = init_encoder_params(schema, 8, np.random.default_rng(1))
    sample = RawSample(dict(data[0].features), data[0].label)
    sample.features["categorical_0"] = 3
    cat = schema.index("categorical_0")
    assert np.array_equal(embed_field(sample, cat, schema, params, binners), params["emb.categorical_0"][3])
    num = schema.index("numerical_0")
    sample.features["numerical_0"] = float(np.median(data.columns["numerical_0"]))
    row = embed_field(sample, num, schema, params, binners)
    matches = [b for b in range(10) if np.array_equal(params["emb.numerical_0"][b], row)]
    assert matches and abs(matches[0] - 5) <= 1
    seq = schema.index("sequence_0")
    expected = encode_sequence(sample.features["sequence_0"], params, "sequence_0", 30)
    assert np.array_equal(embed_field(sample, seq, schema, params, binners), expected)
    label = embed_field(sample, len(schema.fields) - 1, schema, params, binners)
    assert np.array_equal(label, params["emb.label"][sample.label])


def test_embed_field_out_of_vocabulary():
    schema = build_schema(SyntheticConfig(), [("c", "categorical", 5, 0)])
    params = init_encoder_params(schema, 4, np.random.default_rng(0))
    with pytest.raises(SchemaError):
        embed_field(RawSample({"c": 5}, 0), 0, schema, params, {})


def test_median_of_hundred_bins():
    values = np.arange(1000, dtype=float)
    b = fit_binner(values, 100)
    assert abs(int(b.transform([np.median(values)])[0]) - 50) <= 1
