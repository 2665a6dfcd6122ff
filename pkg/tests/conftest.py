import numpy as np
import pytest

from hetctr.diffusion import NoiseSchedule, forward_mask, slice_tokens
from hetctr.encode import fit_binners, tokenize
from hetctr.schema import FieldKind, SyntheticConfig, build_schema, generate_dataset

KIND_CYCLE = (
    (FieldKind.ID, 40, 0),
    (FieldKind.CATEGORICAL, 6, 0),
    (FieldKind.NUMERICAL, 10, 0),
    (FieldKind.SEQUENCE, 30, 4),
)


def small_schema(n_features=4, seed=0):
    rows = [KIND_CYCLE[i % len(KIND_CYCLE)] for i in range(n_features)]
    return build_schema(SyntheticConfig(n_samples=10), rows, seed=seed)


def small_dataset(n_features=4, n=96, seed=0, **synth):
    config = SyntheticConfig(n_samples=n, **synth)
    schema = build_schema(config, [KIND_CYCLE[i % len(KIND_CYCLE)] for i in range(n_features)], seed=seed)
    return generate_dataset(schema, config)


def tokens_of(data):
    return tokenize(data, fit_binners(data))


def masked_batch(data, t=None, rows=24, seed=0, T=10, mode="joint"):
    """A batch where every field has at least one masked row (joint mode)."""
    tokens = slice_tokens(tokens_of(data), np.arange(rows))
    schedule = NoiseSchedule.for_schema(data.schema, T)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        batch = forward_mask(tokens, data.schema, schedule, T // 2 if t is None else t, rng, mode)
        if mode == "ctr" or batch.mask.any(axis=0).all():
            return batch
    raise RuntimeError("could not draw a batch masking every field")


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(loss_fn, arrays, grads, rng, h=1e-5, entries=3, tol=1e-4):
    """Compare analytic grads with central differences: one random direction and a few
    single entries (the largest-gradient ones plus random picks) per array.

    ``loss_fn(arrays)`` evaluates the scalar loss. Returns the worst relative error.
    """
    worst = 0.0
    for name, value in arrays.items():
        g = grads[name]
        direction = rng.standard_normal(value.shape)
        probes = [direction]
        flat_top = np.argsort(-np.abs(g).reshape(-1))[: entries - 1]
        flat_rand = rng.integers(0, value.size, size=1)
        for flat in np.concatenate([flat_top, flat_rand]):
            e = np.zeros(value.size)
            e[flat] = 1.0
            probes.append(e.reshape(value.shape))
        for p in probes:
            plus = dict(arrays)
            minus = dict(arrays)
            plus[name] = value + h * p
            minus[name] = value - h * p
            numeric = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
            analytic = float(np.sum(g * p))
            err = relative_error(analytic, numeric)
            assert err < tol, f"{name}: analytic {analytic!r} vs numeric {numeric!r}"
            worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
