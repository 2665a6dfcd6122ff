"""Pretraining, CTR scoring, fine-tuning and checkpoints.

Variants differ only in how the log-difficulties ``s`` are used:

=========  =========================  ===================
variant    loss aggregation           attention queries
=========  =========================  ===================
full       self-balancing (uses s)    scaled by exp(-s/2)
fix        uniform sum                scaled by exp(-s/2)
std        self-balancing (uses s)    unscaled
uniform    uniform sum, s frozen at 0 unscaled
=========  =========================  ===================
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import balance
from .denoiser import backward, denoise_forward, field_nll, init_params, label_logit
from .diffusion import NoiseSchedule, TokenizedBatch, forward_mask, sample_timestep, slice_tokens
from .encode import CdfBinner, fit_binners, tokenize
from .schema import Dataset, DatasetSchema, FieldKind

log = logging.getLogger(__name__)

VARIANTS = ("full", "fix", "std", "uniform")


@dataclass
class TrainConfig:
    variant: str = "full"
    lr: float = 0.05
    finetune_lr: float | None = None
    batch_size: int = 256
    pretrain_epochs: int = 10
    finetune_epochs: int = 2
    T: int = 100
    seed: int = 0
    l2: float = 0.0
    log_interval: int = 1
    d: int = 16
    n_layers: int = 2
    optimizer: str = "sgd"
    momentum: float = 0.0
    # timestep used when scoring single-field reconstructions
    recon_t: int | None = None
    pool_size: int = 256

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.batch_size < 1 or self.T < 1:
            raise ValueError("batch_size and T must be positive")

    @property
    def balanced(self) -> bool:
        return self.variant in ("full", "std")

    @property
    def modulated(self) -> bool:
        return self.variant in ("full", "fix")

    @property
    def learns_s(self) -> bool:
        return self.variant != "uniform"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in known})


class Optimizer:
    """SGD (optional momentum) or Adam over a name -> array dict; updates are out of place."""

    def __init__(self, kind="sgd", lr=0.05, momentum=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.slots: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, g in grads.items():
            if self.kind == "adam":
                b1, b2 = self.betas
                m = self.slots.setdefault("m", {}).get(name, 0.0)
                v = self.slots.setdefault("v", {}).get(name, 0.0)
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.slots["m"][name] = m
                self.slots["v"][name] = v
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)
            elif self.momentum:
                buf = self.slots.setdefault("momentum", {}).get(name)
                buf = g if buf is None else self.momentum * buf + g
                self.slots["momentum"][name] = buf
                params[name] = params[name] - lr * buf
            else:
                params[name] = params[name] - lr * g


@dataclass
class ModelState:
    schema: DatasetSchema
    params: dict
    s: np.ndarray
    binners: dict
    optimizer: Optimizer
    step: int = 0
    finetune_step: int = 0
    version: int = 0
    tracker: balance.DifficultyTracker | None = None
    epoch_means: list = field(default_factory=list)

    @classmethod
    def initial(cls, schema: DatasetSchema, train: Dataset, config: TrainConfig) -> "ModelState":
        params = init_params(schema, d=config.d, n_layers=config.n_layers, T=config.T, seed=config.seed)
        return cls(
            schema=schema,
            params=params,
            s=np.zeros(schema.n_features),
            binners=fit_binners(train),
            optimizer=Optimizer(config.optimizer, config.lr, config.momentum),
            tracker=balance.DifficultyTracker(schema.n_features),
        )

    def tokens(self, data: Dataset) -> dict:
        if data.schema.digest() != self.schema.digest():
            raise ValueError("dataset schema does not match the model")
        return tokenize(data, self.binners)


# --------------------------------------------------------------------------
# pretraining


def _batches(n: int, batch_size: int, seed: int, epoch: int, stream: int):
    order = np.random.default_rng([seed, epoch, stream]).permutation(n)
    return [order[lo : lo + batch_size] for lo in range(0, n, batch_size)]


def pretrain_loss(batch: TokenizedBatch, params: dict, s, config: TrainConfig, version=0):
    """Forward pass and variant-specific objective; returns (trace, objective, FieldLosses)."""
    use_s = s if config.learns_s else None
    trace = denoise_forward(batch, params, use_s, modulate=config.modulated, version=version)
    n = batch.schema.n_features
    with trace.tape:
        terms = [field_nll(trace, i) for i in range(n)]
        label_term = field_nll(trace, n)
        s_leaf = trace.s if config.balanced else None
        total = balance.objective(terms, label_term, s_leaf)
    _check_finite(terms + [label_term], batch.schema)
    losses = balance.field_losses(terms, label_term)
    return trace, total, losses


def _check_finite(terms, schema: DatasetSchema):
    bad = [f.name for f, term in zip(schema.fields, terms) if term is not None and not np.isfinite(term.value)]
    if bad:
        raise FloatingPointError(f"non-finite reconstruction loss in fields {bad}")


def pretrain_step(tokens: dict, state: ModelState, config: TrainConfig, schedule: NoiseSchedule) -> dict:
    """One update on a batch of clean tokens; returns the TrainRecord row."""
    rng = np.random.default_rng([config.seed, state.step, 0x7157])
    t = sample_timestep(rng, config.T)
    batch = forward_mask(tokens, state.schema, schedule, t, rng, mode="joint")
    trace, total, losses = pretrain_loss(batch, state.params, state.s, config, state.version)
    if not np.isfinite(total.value):
        raise FloatingPointError("non-finite pretraining objective")
    grads = backward(trace, {total: 1.0}, state.version)
    s_grad = grads.pop("s", None)
    if config.l2:
        for name in grads:
            grads[name] = grads[name] + config.l2 * state.params[name]
    state.optimizer.step(state.params, grads)
    if config.learns_s and s_grad is not None:
        holder = {"s": state.s}
        state.optimizer.step(holder, {"s": s_grad})
        state.optimizer.t -= 1
        state.s = holder["s"]
    state.version += 1
    state.tracker.update(losses)
    row = _record_row(state, config, t, float(total.value), losses)
    state.step += 1
    return row


def _record_row(state, config, t, objective, losses):
    row = {
        "step": state.step,
        "variant": config.variant,
        "t": t,
        "objective": objective,
        "label_loss": losses.label,
    }
    diff = state.tracker.difficulty(losses.values)
    for i, f in enumerate(state.schema.features):
        row[f"loss.{f.name}"] = losses.values[i]
        row[f"exp_s.{f.name}"] = float(np.exp(state.s[i]))
        row[f"weight.{f.name}"] = float(np.exp(-state.s[i]))
        row[f"difficulty.{f.name}"] = diff[i]
    return row


class TrainLog:
    """Buffered TrainRecord rows, written as CSV."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.rows: list = []

    def append(self, row):
        self.rows.append(row)

    def write(self, path=None):
        path = Path(path or self.path)
        if not self.rows:
            path.write_text("")
            return path
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
        return path


def _fmt(value):
    if isinstance(value, float):
        return "" if np.isnan(value) else repr(value)
    return value


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def pretrain(state: ModelState, train_tokens: dict, config: TrainConfig, n_steps=None, trainlog=None):
    """Continue pretraining from ``state.step`` for ``n_steps`` (default: to the epoch budget)."""
    schedule = NoiseSchedule.for_schema(state.schema, config.T)
    n = len(train_tokens[state.schema.label.name])
    per_epoch = steps_per_epoch(n, config.batch_size)
    total = per_epoch * config.pretrain_epochs
    stop = total if n_steps is None else min(total, state.step + n_steps)
    while state.step < stop:
        epoch, offset = divmod(state.step, per_epoch)
        rows = _batches(n, config.batch_size, config.seed, epoch, stream=1)[offset]
        row = pretrain_step(slice_tokens(train_tokens, rows), state, config, schedule)
        row["epoch"] = epoch
        if trainlog is not None and (row["step"] % config.log_interval == 0):
            trainlog.append(row)
        if state.step % per_epoch == 0:
            means = state.tracker.end_epoch()
            state.epoch_means.append(means)
            log.info("epoch %d  mean field losses %s", epoch, np.round(means, 3))
    return state


# --------------------------------------------------------------------------
# CTR scoring and fine-tuning


def ctr_batch(tokens: dict, schema: DatasetSchema) -> TokenizedBatch:
    """Label-only mask at t = 1 with every feature visible."""
    return forward_mask(tokens, schema, None, 1, None, mode="ctr")


def ctr_logits(tokens: dict, state: ModelState, config: TrainConfig, chunk: int = 2048) -> np.ndarray:
    out = []
    n = len(tokens[state.schema.label.name])
    s = state.s if config.modulated else None
    for lo in range(0, n, chunk):
        batch = ctr_batch(slice_tokens(tokens, slice(lo, lo + chunk)), state.schema)
        trace = denoise_forward(batch, state.params, s, modulate=config.modulated)
        out.append(label_logit(trace).value)
    return np.concatenate(out) if out else np.zeros(0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def ctr_score(tokens: dict, state: ModelState, config: TrainConfig) -> np.ndarray:
    return sigmoid(ctr_logits(tokens, state, config))


def bce_with_logits(z, y) -> float:
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def finetune_step(tokens: dict, state: ModelState, config: TrainConfig) -> float:
    """One BCE step on the label logit; ``s`` and the binners stay fixed."""
    batch = ctr_batch(tokens, state.schema)
    s = state.s if config.modulated else None
    trace = denoise_forward(batch, state.params, s, modulate=config.modulated, version=state.version)
    y = tokens[state.schema.label.name].astype(np.float64)
    with trace.tape:
        z = label_logit(trace)
        loss = ad.mean(ad.softplus(z) - z * y)
    grads = backward(trace, {loss: 1.0}, state.version)
    grads.pop("s", None)
    if config.l2:
        for name in grads:
            grads[name] = grads[name] + config.l2 * state.params[name]
    state.optimizer.step(state.params, grads, lr=config.finetune_lr or config.lr)
    state.version += 1
    state.finetune_step += 1
    return float(loss.value)


def finetune(state: ModelState, train_tokens: dict, config: TrainConfig):
    n = len(train_tokens[state.schema.label.name])
    per_epoch = steps_per_epoch(n, config.batch_size)
    while state.finetune_step < per_epoch * config.finetune_epochs:
        epoch, offset = divmod(state.finetune_step, per_epoch)
        rows = _batches(n, config.batch_size, config.seed, epoch, stream=2)[offset]
        finetune_step(slice_tokens(train_tokens, rows), state, config)
    return state


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: ModelState, config: TrainConfig, path) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays["s"] = state.s
    for slot, values in state.optimizer.slots.items():
        for k, v in values.items():
            arrays[f"opt/{slot}/{k}"] = np.asarray(v)
    for name, binner in state.binners.items():
        arrays[f"binner/{name}"] = binner.sorted_values_
    tracker = state.tracker.state()
    arrays["tracker/sum"] = tracker["sum"]
    arrays["tracker/count"] = tracker["count"]
    if tracker["reference"] is not None:
        arrays["tracker/reference"] = tracker["reference"]
    if state.epoch_means:
        arrays["epoch_means"] = np.array(state.epoch_means)
    meta = {
        "schema": state.schema.to_dict(),
        "schema_digest": state.schema.digest(),
        "config": config.to_dict(),
        "step": state.step,
        "finetune_step": state.finetune_step,
        "version": state.version,
        "optimizer": {
            "kind": state.optimizer.kind,
            "lr": state.optimizer.lr,
            "momentum": state.optimizer.momentum,
            "t": state.optimizer.t,
        },
        "binner_bins": {name: int(b.n_bins) for name, b in state.binners.items()},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, schema: DatasetSchema | None = None):
    """Returns ``(state, config)``; raises if ``schema`` is given and does not match."""
    with np.load(Path(path), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    stored = DatasetSchema.from_dict(meta["schema"])
    if stored.digest() != meta["schema_digest"]:
        raise ValueError("checkpoint schema digest is corrupt")
    if schema is not None and schema.digest() != meta["schema_digest"]:
        raise ValueError("checkpoint was written for a different schema")
    config = TrainConfig.from_dict(meta["config"])
    opt_meta = meta["optimizer"]
    optimizer = Optimizer(opt_meta["kind"], opt_meta["lr"], opt_meta["momentum"])
    optimizer.t = opt_meta["t"]
    params, binners = {}, {}
    for key, value in arrays.items():
        if key.startswith("param/"):
            params[key[len("param/"):]] = value
        elif key.startswith("opt/"):
            _, slot, name = key.split("/", 2)
            optimizer.slots.setdefault(slot, {})[name] = value
        elif key.startswith("binner/"):
            name = key[len("binner/"):]
            binners[name] = CdfBinner.from_state({"n_bins": meta["binner_bins"][name], "sorted_values": value})
    tracker = balance.DifficultyTracker(stored.n_features)
    tracker.load(
        {
            "sum": arrays["tracker/sum"],
            "count": arrays["tracker/count"],
            "reference": arrays.get("tracker/reference"),
        }
    )
    state = ModelState(
        schema=stored,
        params=params,
        s=arrays["s"],
        binners=binners,
        optimizer=optimizer,
        step=meta["step"],
        finetune_step=meta["finetune_step"],
        version=meta["version"],
        tracker=tracker,
        epoch_means=list(arrays["epoch_means"]) if "epoch_means" in arrays else [],
    )
    return state, config


# --------------------------------------------------------------------------
# experiment pipeline


def reconstruction_report(state: ModelState, tokens: dict, config: TrainConfig) -> dict:
    """Per-feature-field reconstruction accuracy against fixed candidate pools."""
    from .metrics import draw_pool, reconstruction_accuracy

    t = config.recon_t or max(1, config.T // 2)
    s = state.s if config.modulated else None
    out = {}
    for i, spec in enumerate(state.schema.features):
        pool = draw_pool(tokens, state.schema, i, config.pool_size, seed=config.seed)
        out[spec.name] = reconstruction_accuracy(state, tokens, i, pool, t, s=s, modulate=config.modulated)
    return out


def ctr_report(state: ModelState, train: Dataset, test: Dataset, config: TrainConfig) -> dict:
    from . import metrics

    tokens = state.tokens(test)
    p = ctr_score(tokens, state, config)
    y = test.labels
    out = {"auc": metrics.auc(p, y), "logloss": metrics.logloss(p, y), "strata_auc": {}}
    ids = state.schema.indices_of(FieldKind.ID)
    if ids:
        user = state.schema.fields[ids[0]].name
        keys = metrics.user_strata(train.columns[user], test.columns[user])
        out["strata_auc"] = metrics.stratified_auc(p, y, keys)
        out["strata_size"] = {k: int(np.sum(keys == k)) for k in set(keys.tolist())}
    return out


def run_experiment(config: TrainConfig, train: Dataset, test: Dataset, outdir=None, state: ModelState | None = None):
    """Pretrain, checkpoint, fine-tune, evaluate. Returns ``(EvalReport, state)``."""
    from .metrics import EvalReport, spearman_weights

    outdir = None if outdir is None else Path(outdir)
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    state = state or ModelState.initial(train.schema, train, config)
    train_tokens = state.tokens(train)
    test_tokens = state.tokens(test)
    trainlog = TrainLog(None if outdir is None else outdir / "trainlog.csv")
    pretrain(state, train_tokens, config, trainlog=trainlog)
    if outdir is not None:
        trainlog.write()
        save_checkpoint(state, config, outdir / "pretrain.npz")
    recon = reconstruction_report(state, test_tokens, config)
    final = state.epoch_means[-1] if state.epoch_means else np.full(state.schema.n_features, np.nan)
    difficulty = state.tracker.difficulty(final)
    s_pretrained = state.s.copy()
    finetune(state, train_tokens, config)
    if outdir is not None:
        save_checkpoint(state, config, outdir / "finetune.npz")
    ctr = ctr_report(state, train, test, config)
    names = [f.name for f in state.schema.features]
    rho = spearman_weights(s_pretrained, final) if np.all(np.isfinite(final)) else float("nan")
    report = EvalReport(
        auc=ctr["auc"],
        logloss=ctr["logloss"],
        per_field_recon_acc=recon,
        spearman_s_vs_invloss=rho,
        strata_auc=ctr["strata_auc"],
        extra={
            "variant": config.variant,
            "seed": config.seed,
            "steps": state.step,
            "final_field_loss": dict(zip(names, final)),
            "final_difficulty": dict(zip(names, difficulty)),
            "s": dict(zip(names, s_pretrained)),
            "strata_size": ctr.get("strata_size", {}),
        },
    )
    if outdir is not None:
        report.write_json(outdir / "report.json")
        report.write_field_csv(outdir / "fields.csv")
    return report, state


# --------------------------------------------------------------------------
# multi-seed harness

# Adam, small batches, ten pretraining epochs: the A/B setting on the heterogeneity benchmark
AB_SETTINGS = {"optimizer": "adam", "lr": 0.01, "batch_size": 64, "pretrain_epochs": 10, "finetune_epochs": 1}


def benchmark_split(seed: int, n_samples: int = 20000, label_noise: float = 0.1, test_fraction: float = 0.2):
    from .schema import generate_dataset, heterogeneity_benchmark

    schema, synth = heterogeneity_benchmark(seed=seed, n_samples=n_samples, label_noise=label_noise)
    return generate_dataset(schema, synth).split(test_fraction, seed=seed)


def ablate(base: TrainConfig, seeds, variants=VARIANTS, n_samples=20000, label_noise=0.1, outdir=None) -> dict:
    """Run every variant on every seed's benchmark draw; returns variant -> list of EvalReport."""
    results = {v: [] for v in variants}
    for seed in seeds:
        train, test = benchmark_split(seed, n_samples, label_noise)
        for variant in variants:
            config = TrainConfig.from_dict({**base.to_dict(), "variant": variant, "seed": seed})
            target = None if outdir is None else Path(outdir) / f"{variant}-seed{seed}"
            report, _ = run_experiment(config, train, test, target)
            log.info("%s seed %d auc %.4f", variant, seed, report.auc)
            results[variant].append(report)
    return results


def sweep(base: TrainConfig, name: str, values, seeds, n_samples=20000, label_noise=0.1, outdir=None) -> dict:
    """Vary one TrainConfig field; returns value -> list of EvalReport."""
    if name not in {f.name for f in fields(TrainConfig)}:
        raise ValueError(f"unknown config field {name!r}")
    results = {}
    for seed in seeds:
        train, test = benchmark_split(seed, n_samples, label_noise)
        for value in values:
            config = TrainConfig.from_dict({**base.to_dict(), name: value, "seed": seed})
            target = None if outdir is None else Path(outdir) / f"{name}={value}-seed{seed}"
            report, _ = run_experiment(config, train, test, target)
            results.setdefault(value, []).append(report)
    return results
