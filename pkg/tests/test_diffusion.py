import math

import numpy as np
import pytest

from hetctr.diffusion import NoiseSchedule, forward_mask, sample_timestep, schedule_value
from hetctr.schema import FieldKind, SyntheticConfig, build_schema


@pytest.fixture
def schema():
    rows = [("u", "id", 1000, 0), ("c", "categorical", 8, 0), ("x", "numerical", 20, 0), ("h", "sequence", 500, 5)]
    return build_schema(SyntheticConfig(), rows)


def _tokens(schema, n, rng):
    out = {}
    for f in schema.fields:
        if f.kind is FieldKind.SEQUENCE:
            out[f.name] = rng.integers(0, f.cardinality, size=(n, f.seq_len))
        else:
            out[f.name] = rng.integers(0, f.cardinality, size=n)
    return out


def test_schedule_endpoints(schema):
    sched = NoiseSchedule.for_schema(schema, 100)
    for i in range(len(schema.fields)):
        assert schedule_value(sched, i, 0) == 0.0
        assert schedule_value(sched, i, 100) == 1.0


def test_schedule_midpoint_with_unit_exponent():
    sched = NoiseSchedule(100, (1.0,))
    assert schedule_value(sched, 0, 50) == pytest.approx(1 - math.cos(math.pi / 4), abs=1e-15)
    assert schedule_value(sched, 0, 50) == pytest.approx(0.2928932188134524, abs=1e-15)


def test_schedule_out_of_range(schema):
    sched = NoiseSchedule.for_schema(schema, 10)
    with pytest.raises(ValueError):
        schedule_value(sched, 0, 11)
    with pytest.raises(ValueError):
        schedule_value(sched, 0, -1)


def test_schedule_monotone_and_slower_for_wider_vocabularies(schema):
    sched = NoiseSchedule.for_schema(schema, 100)
    rates = sched.rates(np.arange(101))
    assert np.all(np.diff(rates, axis=0) >= 0)
    cards = np.array([f.cardinality for f in schema.fields])
    order = np.argsort(cards)
    assert np.all(np.diff(np.array(sched.kappa)[order]) >= 0)
    # wider vocabulary -> lower masking rate at every interior t
    assert np.all(rates[1:-1, order[0]] >= rates[1:-1, order[-1]])


def test_exponent_formula(schema):
    sched = NoiseSchedule.for_schema(schema)
    vmax = max(f.cardinality for f in schema.fields)
    for f, k in zip(schema.fields, sched.kappa):
        assert k == pytest.approx(1 + math.log(f.cardinality) / math.log(vmax))


def test_forward_mask_extremes(schema, rng):
    sched = NoiseSchedule.for_schema(schema, 10)
    tokens = _tokens(schema, 50, rng)
    assert not forward_mask(tokens, schema, sched, 0, rng).mask.any()
    assert forward_mask(tokens, schema, sched, 10, rng).mask.all()


def test_masked_inputs_read_mask_row(schema, rng):
    sched = NoiseSchedule.for_schema(schema, 10)
    batch = forward_mask(_tokens(schema, 200, rng), schema, sched, 5, rng)
    c = schema.index("c")
    ids = batch.inputs(c)
    assert np.all(ids[batch.mask[:, c]] == 8)
    assert np.array_equal(ids[~batch.mask[:, c]], batch.tokens["c"][~batch.mask[:, c]])


def test_empirical_mask_rates_match_schedule(schema, rng):
    sched = NoiseSchedule.for_schema(schema, 100)
    batch = forward_mask(_tokens(schema, 100_000, rng), schema, sched, 50, rng)
    assert np.all(np.abs(batch.mask.mean(axis=0) - sched.rates(50)) < 0.01)


def test_masking_independent_across_fields(schema, rng):
    sched = NoiseSchedule.for_schema(schema, 100)
    mask = forward_mask(_tokens(schema, 100_000, rng), schema, sched, 70, rng).mask.astype(float)
    corr = np.corrcoef(mask.T)
    off = corr[~np.eye(len(corr), dtype=bool)]
    assert np.all(np.abs(off) < 0.02)


def test_sequence_masked_as_a_whole(schema, rng):
    sched = NoiseSchedule.for_schema(schema, 10)
    batch = forward_mask(_tokens(schema, 30, rng), schema, sched, 6, rng)
    # one flag per field and row, never per token
    assert batch.mask.shape == (30, len(schema.fields))


def test_ctr_mode_masks_label_only(schema, rng):
    batch = forward_mask(_tokens(schema, 20, rng), schema, None, 1, None, mode="ctr")
    assert batch.mask[:, -1].all() and not batch.mask[:, :-1].any()
    assert np.all(batch.t == 1)


def test_timestep_sampling(rng):
    assert {sample_timestep(rng, 1) for _ in range(50)} == {1}
    two = np.array([sample_timestep(rng, 2) for _ in range(100_000)])
    assert set(np.unique(two)) == {1, 2}
    assert abs((two == 1).mean() - 0.5) < 0.01


def test_timestep_frequencies_uniform_over_hundred():
    rng = np.random.default_rng(0)
    draws = np.fromiter((sample_timestep(rng, 100) for _ in range(1_000_000)), dtype=np.int64)
    assert draws.min() == 1 and draws.max() == 100
    freq = np.bincount(draws, minlength=101)[1:] / draws.size
    assert np.all(np.abs(freq - 0.01) < 0.001)
    with pytest.raises(ValueError):
        sample_timestep(rng, 0)
