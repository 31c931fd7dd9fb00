"""Sequential LoRA training with anchor-based distillation, evaluation and run logging."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import anchors as anchor_store
from .anchors import AnchorBuffer, collate, sample_anchor_batch
from .distill import cosine_loss, fd_loss, magnitude_loss, raw_mse_loss
from .lambda_ctl import LambdaState, TraceRow, update, write_trace_csv
from .metrics import AccuracyMatrix, average_accuracy, backward_transfer, drops, per_task_bwt
from .model import (AdamW, BaseModel, ClassifierHead, LoraAdapter, batch_tensors,
                    collect_activations, forward, task_loss)
from .sae import GatedSae, gated_pre_relu, variance_explained
from .synth import ConfigError, SampleBatch, TaskSequence, concat_batches

log = logging.getLogger(__name__)

# mode -> (lambda policy, distillation loss); None means no distillation at all
MODES = {
    "saefd": ("adaptive", "fd"),
    "seq_only": None,
    "fixed_lambda": ("fixed", "fd"),
    "raw_mse": ("adaptive", "mse"),
    "cosine_only": ("adaptive", "cos"),
    "magnitude_only": ("adaptive", "mag"),
}


@dataclass
class RunConfig:
    mode: str = "saefd"
    fixed_lambda: float = 1.0
    n_anchors: int = 200
    rho: float = 0.15
    ema_alpha: float = 0.05
    lambda_min: float = 0.2
    lambda_max: float = 10.0
    lr: float = 1e-4
    batch_size: int = 32
    grad_accum: int = 1
    warmup_frac: float = 0.1
    weight_decay: float = 0.0
    anchor_batch_size: int | None = None
    threshold_frac: float = 0.10
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    epochs: list[int] | None = None
    probe_per_task: int = 125
    anchor_pass_dropout: bool = True
    anchor_dir: str | None = None

    def validate(self, num_tasks: int | None = None) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.n_anchors < 1:
            raise ConfigError("n_anchors must be >= 1")
        if min(self.lr, self.batch_size, self.grad_accum) <= 0:
            raise ConfigError("lr, batch_size and grad_accum must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.mode == "fixed_lambda" and self.fixed_lambda < 0:
            raise ConfigError("fixed_lambda must be >= 0")
        if self.epochs is not None:
            if num_tasks is not None and len(self.epochs) != num_tasks:
                raise ConfigError(f"epochs lists {len(self.epochs)} tasks, sequence has {num_tasks}")
            if any(e < 1 for e in self.epochs):
                raise ConfigError("epochs must be >= 1")
        # constructing the controller state checks rho, alpha and the bounds
        try:
            self.new_lambda_state()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def uses_anchors(self) -> bool:
        return MODES[self.mode] is not None

    def new_lambda_state(self) -> LambdaState:
        return LambdaState(self.lambda_max, self.rho, self.ema_alpha, self.lambda_min, self.lambda_max)


@dataclass
class StepTiming:
    task_id: int
    step: int
    seconds: float
    distilled: bool


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    lambda_trace: list[TraceRow]
    ve_drift: list[tuple[int, float]]
    step_timings: list[StepTiming]
    buffer: AnchorBuffer
    adapter: LoraAdapter
    heads: list[ClassifierHead]
    mode: str
    seed: int

    @property
    def peak(self) -> list[float]:
        return self.matrix.diagonal()

    @property
    def final(self) -> list[float]:
        return self.matrix.final_row()

    def summary(self) -> dict:
        out = {"mode": self.mode, "seed": self.seed, "T": self.matrix.T,
               "AA": 100.0 * average_accuracy(self.matrix)}
        if self.matrix.T >= 2:
            out["BWT"] = 100.0 * backward_transfer(self.matrix)
            out["per_task_bwt"] = [100.0 * v for v in per_task_bwt(self.matrix)]
        out["peak"] = [100.0 * v for v in self.peak]
        out["final"] = [100.0 * v for v in self.final]
        out["drop"] = [100.0 * v for v in drops(self.matrix)]
        out["ve_drift"] = [[t, v] for t, v in self.ve_drift]
        out["anchor_counts"] = dict(self.buffer.per_task_counts)
        return out


class Streams:
    """Independent RNG streams so optional work (anchors) never perturbs the training stream."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(int(seed) % (1 << 64))
        adapter_ss, shuffle_ss, dropout_ss, anchor_ss, anchor_drop_ss, capture_ss = ss.spawn(6)
        self.adapter_seed = int(adapter_ss.generate_state(1)[0])
        self.shuffle = np.random.default_rng(shuffle_ss)
        self.dropout = torch.Generator().manual_seed(int(dropout_ss.generate_state(1)[0]))
        self.anchor = np.random.default_rng(anchor_ss)
        self.anchor_dropout = torch.Generator().manual_seed(int(anchor_drop_ss.generate_state(1)[0]))
        self.capture_seeds = capture_ss.generate_state(64)


def _distill_loss(kind: str, sae, h_curr, h_anc, mask, threshold_frac):
    if kind == "mse":
        return raw_mse_loss(h_curr, h_anc, mask)
    if kind == "fd":
        return fd_loss(sae, h_curr, h_anc, mask, threshold_frac).total
    frozen = [p.detach() for p in (sae.W_gate, sae.b_gate, sae.W_enc, sae.b_enc, sae.b_dec)]
    f_curr = gated_pre_relu(h_curr, *frozen)
    with torch.no_grad():
        f_anc = gated_pre_relu(h_anc, *frozen)
    if kind == "cos":
        return cosine_loss(f_curr, f_anc, mask, threshold_frac)[0]
    return magnitude_loss(f_curr, f_anc, torch.relu(f_anc), mask)


@dataclass
class TaskLog:
    steps: int = 0
    distill_steps: int = 0
    last_task_loss: float = float("nan")
    timings: list[StepTiming] = field(default_factory=list)


def train_task(model: BaseModel, adapter: LoraAdapter, head: ClassifierHead, task_id: int,
               data: SampleBatch, epochs: int, buffer: AnchorBuffer, sae: GatedSae | None,
               lam_state: LambdaState, config: RunConfig, streams: Streams,
               step_offset: int = 0, distill_scale: float | None = None) -> TaskLog:
    """Train adapter + ``head`` on one task.

    When the buffer is nonempty and the mode distills, each optimizer step also samples one
    anchor batch and adds ``lambda * L_distill``.  ``distill_scale`` overrides lambda (test hook).
    """
    policy = MODES[config.mode]
    distill = policy is not None and len(buffer) > 0
    if distill and policy[1] != "mse" and sae is None:
        raise ConfigError(f"mode {config.mode} needs a trained SAE")
    params = list(adapter.parameters()) + list(head.parameters())
    opt = AdamW(params, weight_decay=config.weight_decay)
    anchor_bs = config.anchor_batch_size or config.batch_size

    x_all, m_all, y_all = batch_tensors(data)
    n = len(data)
    n_micro = math.ceil(n / config.batch_size)
    steps_per_epoch = math.ceil(n_micro / config.grad_accum)
    total_steps = steps_per_epoch * epochs
    warmup = max(1, int(round(config.warmup_frac * total_steps)))
    tlog = TaskLog()
    step = 0
    for epoch in range(epochs):
        order = torch.from_numpy(streams.shuffle.permutation(n))
        micro = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        for s in range(0, len(micro), config.grad_accum):
            t0 = time.perf_counter()
            chunk = micro[s:s + config.grad_accum]
            opt.zero_grad()
            task_vals = []
            for idx in chunk:
                out = forward(model, adapter, head, x_all[idx], m_all[idx], train_mode=True,
                              generator=streams.dropout)
                lt = task_loss(out.logits, y_all[idx])
                (lt / len(chunk)).backward()
                task_vals.append(lt.item())
            L_task = float(np.mean(task_vals))
            L_d = None
            if distill:
                xa, ma, ha = collate(sample_anchor_batch(buffer, anchor_bs, streams.anchor))
                h_curr = collect_activations(model, adapter, xa, ma, grad=True,
                                             train_mode=config.anchor_pass_dropout,
                                             generator=streams.anchor_dropout)
                loss_d = _distill_loss(policy[1], sae, h_curr, ha, ma, config.threshold_frac)
                L_d = loss_d.item()
                gstep = step_offset + step
                if distill_scale is not None:
                    lam = distill_scale
                elif policy[0] == "fixed":
                    lam_state.lam = config.fixed_lambda
                    lam_state.log(gstep, task_id, L_task, L_d)
                    lam = lam_state.lam
                else:
                    update(lam_state, L_task, L_d, gstep, task_id)
                    lam = lam_state.lam
                (lam * loss_d).backward()
                tlog.distill_steps += 1
            if not math.isfinite(L_task) or (L_d is not None and not math.isfinite(L_d)):
                raise FloatingPointError(
                    f"non-finite loss at task {task_id}, epoch {epoch}, step {step}: "
                    f"L_task={L_task}, L_distill={L_d}, lambda={lam_state.lam}")
            opt.step(config.lr * min(1.0, (step + 1) / warmup))
            tlog.timings.append(StepTiming(task_id, step_offset + step, time.perf_counter() - t0, distill))
            tlog.last_task_loss = L_task
            step += 1
    tlog.steps = step
    opt.zero_grad()
    return tlog


def evaluate(model: BaseModel, adapter: LoraAdapter | None, head: ClassifierHead, data: SampleBatch,
             chunk: int = 1024) -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class index)."""
    if len(data) == 0:
        raise ValueError("empty test set")
    x, m, y = batch_tensors(data)
    correct = 0
    with torch.no_grad():
        for i in range(0, len(data), chunk):
            out = forward(model, adapter, head, x[i:i + chunk], m[i:i + chunk], train_mode=False)
            correct += int((out.logits.argmax(dim=-1) == y[i:i + chunk]).sum())
    return correct / len(data)


def probe_set(sequence: TaskSequence, per_task: int) -> SampleBatch:
    return concat_batches([b.subset(np.arange(min(per_task, len(b)))) for b in sequence.test])


def probe_variance_explained(model, adapter, sae, probe: SampleBatch) -> float:
    x, m, _ = batch_tensors(probe)
    acts = collect_activations(model, adapter, x, m)
    return variance_explained(sae, acts[m > 0])


def run_sequence(config: RunConfig, seed: int, sequence: TaskSequence, model: BaseModel,
                 sae: GatedSae | None = None, distill_scale: float | None = None) -> RunResult:
    """Train every task in order; fill the accuracy matrix, capture anchors, track SAE fidelity."""
    T = len(sequence)
    config.validate(T)
    policy = MODES[config.mode]
    if policy is not None and policy[1] != "mse" and sae is None:
        raise ConfigError(f"mode {config.mode} needs a trained SAE")
    if config.n_anchors > min(b.__len__() for b in sequence.train) and config.uses_anchors:
        raise ConfigError("n_anchors exceeds a task's training set")
    streams = Streams(seed)
    adapter = LoraAdapter(model.layer_shapes(), config.lora_rank, config.lora_alpha,
                          config.lora_dropout, seed=streams.adapter_seed)
    buffer = AnchorBuffer()
    lam_state = config.new_lambda_state()
    matrix = AccuracyMatrix()
    heads: list[ClassifierHead] = []
    timings: list[StepTiming] = []
    probe = probe_set(sequence, config.probe_per_task)
    ve_drift = []
    if sae is not None:
        ve_drift.append((0, probe_variance_explained(model, adapter, sae, probe)))
    if config.anchor_dir:
        os.makedirs(config.anchor_dir, exist_ok=True)

    step = 0
    for t, spec in enumerate(sequence.tasks):
        head = ClassifierHead(spec.num_classes, model.activation_dim)
        heads.append(head)
        epochs = config.epochs[t] if config.epochs is not None else spec.epochs
        tlog = train_task(model, adapter, head, spec.task_id, sequence.train[t], epochs, buffer, sae,
                          lam_state, config, streams, step_offset=step, distill_scale=distill_scale)
        step += tlog.steps
        timings.extend(tlog.timings)
        row = [evaluate(model, adapter, heads[j], sequence.test[j]) for j in range(t + 1)]
        matrix.add_row(row)
        if config.uses_anchors:
            records = anchor_store.capture_anchors(model, adapter, sequence.train[t], config.n_anchors,
                                                   int(streams.capture_seeds[t % 64]), spec.task_id)
            anchor_store.append(buffer, records)
            if config.anchor_dir:
                block = AnchorBuffer()
                anchor_store.append(block, records)
                anchor_store.save(block, os.path.join(config.anchor_dir, f"anchors_task{spec.task_id}.sfda"))
        if sae is not None:
            ve_drift.append((spec.task_id, probe_variance_explained(model, adapter, sae, probe)))
        log.info("task %d done: %d steps, row=%s", spec.task_id, tlog.steps,
                 " ".join(f"{100 * v:.1f}" for v in row))
    return RunResult(matrix, list(lam_state.trace), ve_drift, timings, buffer, adapter, heads,
                     config.mode, seed)


def write_run_outputs(result: RunResult, out_dir, config_echo: dict | None = None) -> list[str]:
    """matrix.csv, summary.json, ve_drift.csv, timings.csv and (distilling modes) lambda_trace.csv."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name):
        written.append(name)
        return os.path.join(out_dir, name)

    result.matrix.to_csv(path("matrix.csv"))
    summary = result.summary()
    summary["config"] = config_echo or {}
    with open(path("summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if MODES[result.mode] is not None:
        write_trace_csv(result.lambda_trace, path("lambda_trace.csv"))
    with open(path("ve_drift.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["after_task", "variance_explained"])
        for t, v in result.ve_drift:
            w.writerow([t, repr(v)])
    with open(path("timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "step", "seconds", "distilled"])
        for r in result.step_timings:
            w.writerow([r.task_id, r.step, f"{r.seconds:.6e}", int(r.distilled)])
    return written


def config_dict(config: RunConfig) -> dict:
    return asdict(config)
