"""Loss, optimizer, schedules, train/eval loops, gradient checks and the
discretization ablation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as net
from .events import (
    AugmentConfig, EventStream, SynthConfig, augment_jitter_drop, batch_pad, cutmix,
    gen_synthetic_timing_task, slice_events,
)
from .model import ModelConfig, ModelWeights
from .ssm import DiscretizationMode

SSM_DYNAMICS = ("ssm.phi", "ssm.theta", "ssm.log_delta")
PRECISIONS = {"single": np.float32, "double": np.float64}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-3
    lr_floor: float = 1e-5
    weight_decay: float = 0.01
    warmup_steps: int = 50
    schedule: str = "cosine"  # "cosine" | "constant"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ssm_lr_scale: float = 1.0
    ssm_weight_decay: bool = False
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    slice_len: int = 0  # 0 disables slicing
    precision: str = "single"
    time_unit: float = 1e-6
    eval_batch_size: int = 64

    def __post_init__(self) -> None:
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        for name in ("epochs", "lr", "lr_floor", "weight_decay", "warmup_steps", "slice_len",
                     "ssm_lr_scale", "time_unit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    weights: ModelWeights
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator

    @classmethod
    def create(cls, weights: ModelWeights, rng: np.random.Generator) -> TrainState:
        named = weights.named_tensors()
        return cls(
            weights,
            {k: np.zeros_like(a) for k, a in named.items()},
            {k: np.zeros_like(a) for k, a in named.items()},
            0,
            rng,
        )


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    events_per_second: float
    wall_time: float
    num_samples: int = 0
    num_events: int = 0
    step: int = 0

    DETERMINISTIC = ("epoch", "split", "loss", "accuracy", "num_samples", "num_events", "step")

    def deterministic(self) -> dict:
        """Fields that are reproducible run-to-run (no timing)."""
        return {k: getattr(self, k) for k in self.DETERMINISTIC}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_soft(logits: np.ndarray, labels: np.ndarray, return_grad: bool = False):
    """Batch mean of ``-sum_k label_k log softmax(logits)_k``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} differ")
    if np.any(labels < 0) or not np.allclose(labels.sum(axis=-1), 1.0, atol=1e-5):
        raise ValueError("every label row must be a probability distribution")
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = float(-(labels * logp).sum() / n)
    if not return_grad:
        return loss
    return loss, (np.exp(logp) - labels) / n


# --------------------------------------------------------------------------
# Optimizer and schedule
# --------------------------------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to ``cfg.lr_floor``
    at ``total_steps``.

    Without warmup, step 0 sits at the floor. Updates use ``step + 1``, so
    the value at step 0 is never applied. The floor never exceeds ``cfg.lr``,
    so ``lr=0`` freezes the weights.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    floor = min(cfg.lr_floor, cfg.lr)
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if step == 0:
        return floor
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


def _is_dynamics(name: str) -> bool:
    return name.endswith(SSM_DYNAMICS)


def optimizer_step(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig, lr: float) -> TrainState:
    """Bias-corrected Adam update with decoupled weight decay.

    SSM dynamics tensors (``phi``, ``theta``, ``log_delta``) use
    ``lr * cfg.ssm_lr_scale`` and are decayed only if ``cfg.ssm_weight_decay``.
    """
    named = state.weights.named_tensors()
    if set(grads) != set(named):
        missing = sorted(set(named) ^ set(grads))
        raise ValueError(f"gradient names do not match weights: {missing}")
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_w, new_m, new_v = {}, {}, {}
    for name, w in named.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        g = g.astype(w.dtype, copy=False)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        dynamics = _is_dynamics(name)
        step_lr = lr * cfg.ssm_lr_scale if dynamics else lr
        decay = 0.0 if (dynamics and not cfg.ssm_weight_decay) else cfg.weight_decay
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_w[name] = (w * (1.0 - lr * decay) - step_lr * update).astype(w.dtype)
        new_m[name], new_v[name] = m.astype(w.dtype), v.astype(w.dtype)
    weights = ModelWeights.from_named(new_w, len(state.weights.layers))
    return TrainState(weights, new_m, new_v, t, state.rng)


# --------------------------------------------------------------------------
# Loops
# --------------------------------------------------------------------------


def loss_and_grads(w: ModelWeights, batch, mcfg: ModelConfig, train: bool = False, rng=None):
    logits, cache = net.model_forward(w, batch, mcfg, train=train, rng=rng, return_cache=True)
    loss, d_logits = cross_entropy_soft(logits, batch.labels, return_grad=True)
    grads = net.model_backward(w, mcfg, cache, d_logits)
    return loss, logits, grads


def _prepare_train_batch(streams, tcfg: TrainConfig, num_classes: int, rng) -> list[EventStream]:
    aug = tcfg.augment
    out = []
    for i, s in enumerate(streams):
        if aug.cutmix_prob and len(streams) > 1 and rng.random() < aug.cutmix_prob:
            j = int(rng.integers(0, len(streams) - 1))
            j += j >= i
            s = cutmix(s, streams[j], rng, num_classes)
        if aug.drop_prob or aug.time_jitter_us or aug.channel_jitter:
            s = augment_jitter_drop(s, aug, rng)
        if tcfg.slice_len:
            s = slice_events(s, tcfg.slice_len, rng)
        out.append(s)
    return out


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_epoch(
    state: TrainState,
    dataset: Sequence[EventStream],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    epoch: int = 1,
    total_steps: int | None = None,
) -> tuple[TrainState, MetricsRecord]:
    """One shuffled pass: augment, slice, pad, forward, backward, update.

    All randomness comes from ``state.rng``.
    """
    if not dataset:
        raise ValueError("training set is empty")
    rng = state.rng
    if total_steps is None:
        total_steps = tcfg.epochs * steps_per_epoch(len(dataset), tcfg.batch_size)
    order = rng.permutation(len(dataset))
    t0 = time.perf_counter()
    loss_sum = correct = events = 0.0
    for start in range(0, len(order), tcfg.batch_size):
        streams = [dataset[i] for i in order[start:start + tcfg.batch_size]]
        streams = _prepare_train_batch(streams, tcfg, mcfg.num_classes, rng)
        batch = batch_pad(streams, tcfg.time_unit, mcfg.num_classes, tcfg.dtype)
        loss, logits, grads = loss_and_grads(state.weights, batch, mcfg, train=True, rng=rng)
        lr = lr_schedule(state.step + 1, tcfg, total_steps)
        state = optimizer_step(state, grads, tcfg, lr)
        loss_sum += loss * len(streams)
        correct += int((logits.argmax(-1) == batch.labels.argmax(-1)).sum())
        events += batch.num_events
    wall = time.perf_counter() - t0
    n = len(dataset)
    return state, MetricsRecord(
        epoch, "train", loss_sum / n, correct / n, events / max(wall, 1e-12), wall,
        n, int(events), state.step,
    )


def evaluate(
    weights: ModelWeights,
    dataset: Sequence[EventStream],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    epoch: int = 0,
    split: str = "test",
    step: int = 0,
) -> MetricsRecord:
    """Full-length, unaugmented evaluation; accuracy against hard labels."""
    t0 = time.perf_counter()
    loss_sum = correct = events = 0.0
    for start in range(0, len(dataset), tcfg.eval_batch_size):
        streams = list(dataset[start:start + tcfg.eval_batch_size])
        batch = batch_pad(streams, tcfg.time_unit, mcfg.num_classes, weights.dtype)
        logits = net.model_forward(weights, batch, mcfg, train=False)
        hard = np.eye(mcfg.num_classes, dtype=logits.dtype)[[s.hard_label for s in streams]]
        loss_sum += cross_entropy_soft(logits, hard) * len(streams)
        correct += int((logits.argmax(-1) == hard.argmax(-1)).sum())
        events += batch.num_events
    wall = time.perf_counter() - t0
    n = max(len(dataset), 1)
    return MetricsRecord(
        epoch, split, loss_sum / n, correct / n, events / max(wall, 1e-12), wall,
        len(dataset), int(events), step,
    )


def fit(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    train_set: Sequence[EventStream],
    eval_sets: dict[str, Sequence[EventStream]] | None = None,
    state: TrainState | None = None,
    start_epoch: int = 1,
    on_epoch: Callable[[TrainState, int, list[MetricsRecord]], None] | None = None,
) -> tuple[TrainState, list[MetricsRecord]]:
    """Train for ``tcfg.epochs`` epochs, evaluating each split after every epoch."""
    if state is None:
        rng = np.random.default_rng(tcfg.seed)
        weights = net.init_weights(mcfg, rng, tcfg.dtype)
        state = TrainState.create(weights, rng)
    total = tcfg.epochs * steps_per_epoch(len(train_set), tcfg.batch_size)
    history: list[MetricsRecord] = []
    for epoch in range(start_epoch, tcfg.epochs + 1):
        state, record = train_epoch(state, train_set, mcfg, tcfg, epoch, total)
        records = [record]
        for split, data in (eval_sets or {}).items():
            records.append(evaluate(state.weights, data, mcfg, tcfg, epoch, split, state.step))
        history.extend(records)
        if on_epoch is not None:
            on_epoch(state, epoch, records)
    return state, history


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error; ``floor`` keeps vanishing gradients (where
    both sides are finite-difference noise) from dominating."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass
class GradcheckReport:
    mode: str
    errors: dict[str, float]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(e <= self.threshold for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def tiny_config(mode="async", **overrides) -> ModelConfig:
    base = dict(
        num_channels=6, num_classes=3, num_layers=2, state_size=4, width=4,
        pooling=(2, 1), width_mult=(1, 2), mode=mode, dropout=0.0,
        delta_range=(1.0, 1000.0),
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng: np.random.Generator, cfg: ModelConfig, batch: int = 2, length: int = 32,
                 mean_gap_us: float = 1000.0, time_unit: float = 1e-6):
    """Ragged random batch for checks (second row shorter to exercise padding)."""
    streams = []
    for i in range(batch):
        m = length - 7 * i if length > 7 * i else length
        gaps = rng.exponential(mean_gap_us, m)
        gaps[0] = 0
        times = np.rint(np.cumsum(gaps)).astype(np.int64)
        channels = rng.integers(0, cfg.num_channels, m)
        streams.append(EventStream(times, channels, cfg.num_channels, i % cfg.num_classes))
    return batch_pad(streams, time_unit, cfg.num_classes, np.float64)


def gradcheck_model(
    cfg: ModelConfig,
    rng: np.random.Generator,
    epsilon: float = 1e-5,
    threshold: float = 1e-3,
    length: int = 32,
) -> GradcheckReport:
    """Central finite differences on every weight tensor of a (tiny) model."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    cfg = replace(cfg, dropout=0.0)
    weights = net.init_weights(cfg, rng, np.float64)
    batch = random_batch(rng, cfg, length=length)
    _, _, grads = loss_and_grads(weights, batch, cfg)
    named = weights.named_tensors()

    def loss_at() -> float:
        return cross_entropy_soft(net.model_forward(weights, batch, cfg), batch.labels)

    errors = {}
    for name, arr in named.items():
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + epsilon
            up = loss_at()
            arr[idx] = old - epsilon
            down = loss_at()
            arr[idx] = old
            numeric[idx] = (up - down) / (2 * epsilon)
        errors[name] = relative_error(grads[name], numeric)
    return GradcheckReport(cfg.mode, errors, threshold)


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


@dataclass
class AblationRow:
    mode: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def run_ablation(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    modes: Iterable,
    seeds: Sequence[int],
    synth: SynthConfig | None = None,
    data_seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """Train one model per ``(mode, seed)`` on the synthetic timing task and
    collect test accuracies per mode."""
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    synth = synth or SynthConfig(num_channels=mcfg.num_channels, num_classes=mcfg.num_classes)
    data = gen_synthetic_timing_task(synth, np.random.default_rng(data_seed))
    rows = []
    for mode in modes:
        mode = DiscretizationMode.parse(mode).value
        accs = []
        for seed in seeds:
            state, _ = fit(replace(mcfg, mode=mode), replace(tcfg, seed=int(seed)), data["train"])
            rec = evaluate(state.weights, data["test"], replace(mcfg, mode=mode), tcfg)
            accs.append(rec.accuracy)
            if log:
                log(f"{mode} seed={seed} test_acc={rec.accuracy:.4f}")
        rows.append(AblationRow(mode, accs))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'mode':<16} {'mean':>8} {'std':>8}  runs", "-" * 44]
    for r in rows:
        lines.append(f"{r.mode:<16} {100 * r.mean:7.2f}% {100 * r.std:7.2f}%  {len(r.accuracies)}")
    return "\n".join(lines) + "\n"


def ablation_json(rows: Sequence[AblationRow]) -> str:
    return json.dumps(
        [{"mode": r.mode, "mean": r.mean, "std": r.std, "accuracies": r.accuracies} for r in rows],
        indent=2,
    )
