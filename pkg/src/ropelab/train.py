"""Deterministic training harness: schedule, optimizer, traces, sweeps.

A run is fully described by a ``TrainRun`` record; given the same record,
``train`` produces byte-identical loss traces.  The learning-rate schedule
ramps linearly from zero over the warmup span, then follows a half-cosine
down to a floor fraction of the peak.  Optimization is decoupled-decay
Adam with bias correction and optional global-norm gradient clipping.
Post-hoc spike detection flags steps whose loss jumps above the recent
running minimum by more than a threshold in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import data as data_mod
from .exceptions import DivergenceError, ParameterError, RangeError
from .model import (ModelConfig, ModelParams, init_model_params, named_parameters,
                    next_token_loss, save_checkpoint)
from .rope import build_cache
from .tensor import backward


@dataclass(frozen=True)
class Schedule:
    """Warmup-then-cosine learning-rate schedule."""

    total_steps: int
    peak_lr: float = 4e-4
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.10

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.peak_lr <= 0.0:
            raise ParameterError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ParameterError(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")
        if not 0.0 < self.final_lr_frac <= 1.0:
            raise ParameterError(
                f"final_lr_frac must lie in (0, 1], got {self.final_lr_frac}")


def warmup_steps(schedule: Schedule) -> int:
    return max(1, int(round(schedule.warmup_frac * schedule.total_steps)))


def lr_at(step: int, schedule: Schedule) -> float:
    """Learning rate at an integer step in [0, total_steps].

    Exactly zero at step 0, exactly ``peak_lr`` at the end of warmup, and
    exactly ``final_lr_frac * peak_lr`` at the final step (the cosine hits
    -1 with no rounding slack).
    """
    if not 0 <= step <= schedule.total_steps:
        raise RangeError(f"step {step} outside [0, {schedule.total_steps}]")
    w = warmup_steps(schedule)
    if step <= w:
        return schedule.peak_lr * (step / w)
    final = schedule.final_lr_frac * schedule.peak_lr
    progress = (step - w) / (schedule.total_steps - w)
    return final + 0.5 * (schedule.peak_lr - final) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a named parameter list.

    Decay multiplies weights by ``1 - lr * weight_decay`` before the Adam
    update; moment estimates are bias-corrected.  Parameters whose ``grad``
    is None are skipped entirely.  A non-finite gradient aborts with
    ``DivergenceError`` naming the parameter and step.
    """

    def __init__(self, named_params: list, betas: tuple = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.1):
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ParameterError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0.0:
            raise ParameterError(f"eps must be positive, got {eps}")
        if weight_decay < 0.0:
            raise ParameterError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.named_params = list(named_params)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float) -> None:
        if lr < 0.0:
            raise ParameterError(f"lr must be nonnegative, got {lr}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient for {name} at optimizer step {self.t}")
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m, v = self._m[i], self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(named_params: list) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(named_params: list, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    if max_norm <= 0.0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(named_params)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class LossTrace:
    """Per-step record of one run, plus post-hoc spike annotations."""

    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    spikes: list = field(default_factory=list)  # (step, jump magnitude in nats)


def detect_spikes(trace: LossTrace, window: int = 100,
                  delta_nats: float = 0.5) -> list:
    """Steps whose loss exceeds the windowed running minimum by the threshold.

    A step ``t`` is flagged when ``loss[t] > min(loss over the previous
    ``window`` recorded steps) + delta_nats``; the magnitude reported is the
    excess over that minimum.  The first recorded step has no history and is
    never flagged.
    """
    if window < 1:
        raise ParameterError(f"window must be >= 1, got {window}")
    if delta_nats <= 0.0:
        raise ParameterError(f"delta_nats must be positive, got {delta_nats}")
    flagged = []
    losses = trace.loss
    for i in range(1, len(losses)):
        reference = min(losses[max(0, i - window):i])
        if losses[i] > reference + delta_nats:
            flagged.append((trace.steps[i], losses[i] - reference))
    return flagged


def write_trace_csv(trace: LossTrace, path) -> None:
    """Byte-stable CSV: header ``step,loss,lr,spike``, floats via repr."""
    spike_steps = {s for s, _ in trace.spikes}
    lines = ["step,loss,lr,spike"]
    for step, loss, lr in zip(trace.steps, trace.loss, trace.lr):
        lines.append(f"{step},{loss!r},{lr!r},{1 if step in spike_steps else 0}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace_csv(path) -> LossTrace:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "step,loss,lr,spike":
        raise OSError(f"not a loss trace: {path}")
    trace = LossTrace()
    for line in lines[1:]:
        step_s, loss_s, lr_s, spike_s = line.split(",")
        trace.steps.append(int(step_s))
        trace.loss.append(float(loss_s))
        trace.lr.append(float(lr_s))
        if spike_s == "1":
            trace.spikes.append((int(step_s), float("nan")))
    return trace


@dataclass(frozen=True)
class TrainRun:
    """Everything that determines a training trajectory."""

    seed: int
    model_cfg: ModelConfig
    schedule: Schedule
    batch_size: int
    steps: int
    corpus_id: str  # "synthetic:copy", "synthetic:reverse", or a file path
    seq_len: int
    clip_norm: Optional[float] = 1.0
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    split_frac: float = 0.1
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.steps <= self.schedule.total_steps:
            raise ParameterError(f"steps {self.steps} must lie in "
                                 f"[1, total_steps={self.schedule.total_steps}]")
        if self.seq_len < 2 or self.seq_len > self.model_cfg.attention.rope.max_positions:
            raise ParameterError(
                f"seq_len {self.seq_len} must lie in [2, max_positions="
                f"{self.model_cfg.attention.rope.max_positions}]")
        if self.log_every < 1:
            raise ParameterError(f"log_every must be >= 1, got {self.log_every}")


def run_name(run: TrainRun) -> str:
    corpus = run.corpus_id.replace("synthetic:", "")
    corpus = "".join(c if c.isalnum() else "-" for c in corpus).strip("-") or "corpus"
    fraction = run.model_cfg.attention.rope.rotary_fraction
    return (f"{corpus}_{run.model_cfg.topology.kind}_f{fraction:g}_seed{run.seed}")


def _is_synthetic(corpus_id: str) -> bool:
    return corpus_id.startswith("synthetic:")


def training_stream(run: TrainRun) -> Iterator:
    """The (tokens, loss_mask) iterator a run trains on.

    Depends only on the run's seed and data description, never on model
    hyperparameters, so runs differing only in architecture see identical
    batches.
    """
    if _is_synthetic(run.corpus_id):
        kind = run.corpus_id.split(":", 1)[1]
        return data_mod.make_synthetic_task(kind, run.seq_len,
                                            run.model_cfg.vocab_size,
                                            run.seed, run.batch_size)
    train_ids, _ = data_mod.ingest_corpus(run.corpus_id, run.split_frac)
    if run.model_cfg.vocab_size < data_mod.BYTE_VOCAB:
        raise ParameterError(
            f"byte corpus needs vocab_size >= {data_mod.BYTE_VOCAB}, "
            f"got {run.model_cfg.vocab_size}")
    return data_mod.contiguous_batches(train_ids, run.seq_len, run.batch_size, run.seed)


def held_out_stream(run: TrainRun, n_batches: int = 16) -> list:
    """A fixed evaluation batch list matching the run's data description."""
    if _is_synthetic(run.corpus_id):
        kind = run.corpus_id.split(":", 1)[1]
        return data_mod.synthetic_eval_batches(kind, run.seq_len,
                                               run.model_cfg.vocab_size,
                                               run.seed, run.batch_size, n_batches)
    _, held_ids = data_mod.ingest_corpus(run.corpus_id, run.split_frac)
    return data_mod.held_out_batches(held_ids, run.seq_len, run.batch_size,
                                     limit=n_batches)


def train(run: TrainRun, out_dir: Optional[str] = None,
          params: Optional[ModelParams] = None) -> tuple:
    """Execute a run; returns ``(trace, params)``.

    When ``out_dir`` is given, the loss trace CSV and a final checkpoint
    (with manifest) land there under :func:`run_name`.  Pass ``params`` to
    resume from existing weights instead of seeding fresh ones.
    """
    config = run.model_cfg
    if params is None:
        init_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=run.seed, spawn_key=(100,)))
        params = init_model_params(config, init_rng)
    cache = build_cache(config.attention.rope)
    named = named_parameters(params)
    optimizer = AdamW(named, betas=run.betas, eps=run.adam_eps,
                      weight_decay=run.weight_decay)
    stream = training_stream(run)
    trace = LossTrace()
    for step in range(run.steps):
        tokens, mask = next(stream)
        try:
            loss = next_token_loss(tokens, params, config, cache, loss_mask=mask)
            loss_value = loss.item()
            backward(loss)
        except FloatingPointError as e:
            tail = [round(v, 4) for v in trace.loss[-5:]]
            raise DivergenceError(
                f"training diverged at step {step}: {e}; recent losses {tail}") from e
        if run.clip_norm is not None:
            clip_gradients(named, run.clip_norm)
        lr = lr_at(step + 1, run.schedule)
        try:
            optimizer.step(lr)
        except DivergenceError as e:
            tail = [round(v, 4) for v in trace.loss[-5:]]
            raise DivergenceError(f"{e}; recent losses {tail}") from e
        optimizer.zero_grad()
        if step % run.log_every == 0 or step == run.steps - 1:
            trace.steps.append(step)
            trace.loss.append(loss_value)
            trace.lr.append(lr)
    trace.spikes = detect_spikes(trace)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        name = run_name(run)
        write_trace_csv(trace, out / f"{name}.csv")
        save_checkpoint(out / f"{name}.ckpt", params, config)
    return trace, params


def sweep_runs(base: TrainRun, fractions: list, seeds: list) -> list:
    """Cross a base run over rotary fractions and seeds."""
    runs = []
    for fraction in fractions:
        rope = replace(base.model_cfg.attention.rope, rotary_fraction=fraction)
        attention = replace(base.model_cfg.attention, rope=rope)
        model_cfg = replace(base.model_cfg, attention=attention)
        for seed in seeds:
            runs.append(replace(base, model_cfg=model_cfg, seed=seed))
    return runs


def run_sweep(runs: list, out_dir: Optional[str] = None) -> list:
    """Train several runs in sequence; returns their traces in order."""
    return [train(run, out_dir=out_dir)[0] for run in runs]
