"""Frozen position-wise encoder with LoRA adapters, per-task classifier heads and AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import KIND_MODEL, FormatError, read_checkpoint, write_checkpoint
from .synth import SampleBatch


class BaseModel(nn.Module):
    """Two position-wise affine+GELU layers, d_in -> d -> d.

    Weights are buffers, so no optimizer can ever receive them.  The output of the
    second layer is the "last-layer MLP" activation that the SAE reads.
    """

    def __init__(self, d_in: int = 32, d: int = 64, seed: int = 0, weight_gain: float = 1.0):
        super().__init__()
        if d_in <= 0 or d <= 0:
            raise ValueError("model dimensions must be positive")
        self.d_in = d_in
        self.activation_dim = d
        gen = torch.Generator().manual_seed(int(seed) % (1 << 63))
        dims = [(d_in, d), (d, d)]
        for i, (fan_in, fan_out) in enumerate(dims):
            std = weight_gain * math.sqrt(2.0 / fan_in)
            self.register_buffer(f"W{i}", torch.randn(fan_out, fan_in, generator=gen) * std)
            self.register_buffer(f"b{i}", torch.randn(fan_out, generator=gen) * 0.1)

    def layers(self):
        return [(self.W0, self.b0), (self.W1, self.b1)]

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(in, out) per adaptable layer."""
        return [(W.shape[1], W.shape[0]) for W, _ in self.layers()]


class LoraAdapter(nn.Module):
    """Low-rank update ``(alpha / r) * B @ A`` for every encoder layer; B starts at zero."""

    def __init__(self, layer_shapes, rank: int = 8, alpha: float = 32.0, dropout_p: float = 0.1,
                 seed: int = 0):
        super().__init__()
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if any(rank > min(i, o) for i, o in layer_shapes):
            raise ValueError(f"rank {rank} exceeds a layer dimension")
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        gen = torch.Generator().manual_seed(int(seed) % (1 << 63))
        self.A = nn.ParameterList()
        self.B = nn.ParameterList()
        for fan_in, fan_out in layer_shapes:
            bound = 1.0 / math.sqrt(fan_in)
            self.A.append(nn.Parameter((torch.rand(rank, fan_in, generator=gen) * 2 - 1) * bound))
            self.B.append(nn.Parameter(torch.zeros(fan_out, rank)))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class ClassifierHead(nn.Module):
    """Linear head on mean-pooled activations; zero-initialized."""

    def __init__(self, num_classes: int, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(num_classes, d))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    def forward(self, pooled):
        return pooled @ self.weight.T + self.bias


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    activations: torch.Tensor


def batch_tensors(batch: SampleBatch, dtype=torch.float32):
    """(inputs, mask, labels) as torch tensors."""
    return (torch.from_numpy(batch.inputs).to(dtype),
            torch.from_numpy(batch.mask.astype(np.float32)).to(dtype),
            torch.from_numpy(batch.labels))


def encode_tokens(model: BaseModel, adapter: LoraAdapter | None, inputs, mask,
                  train_mode: bool = False, generator: torch.Generator | None = None):
    """Per-position last-layer activations (B, L, d); padded positions are zeroed."""
    if inputs.shape[-1] != model.d_in:
        raise ValueError(f"input dim {inputs.shape[-1]} != model d_in {model.d_in}")
    if mask.shape != inputs.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match inputs {tuple(inputs.shape)}")
    h = inputs
    for i, (W, b) in enumerate(model.layers()):
        W = W.to(h.dtype)
        z = h @ W.T + b.to(h.dtype)
        if adapter is not None:
            x = h
            p = adapter.dropout_p
            if train_mode and p > 0:
                keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= p
                x = h * keep / (1.0 - p)
            z = z + adapter.scaling * ((x @ adapter.A[i].T) @ adapter.B[i].T)
        h = F.gelu(z)
    return h * mask.unsqueeze(-1)


def pool(activations, mask):
    counts = mask.sum(dim=1, keepdim=True)
    if torch.any(counts == 0):
        raise ValueError("all-padding row cannot be pooled")
    return activations.sum(dim=1) / counts


def forward(model: BaseModel, adapter: LoraAdapter | None, head: ClassifierHead, inputs, mask,
            train_mode: bool = False, generator: torch.Generator | None = None) -> ForwardOutput:
    acts = encode_tokens(model, adapter, inputs, mask, train_mode, generator)
    return ForwardOutput(logits=head(pool(acts, mask)), activations=acts)


def task_loss(logits, labels):
    """Mean cross-entropy of the true class."""
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


def collect_activations(model, adapter, inputs, mask, grad: bool = False,
                        train_mode: bool = False, generator=None):
    """Last-layer activations; without ``grad`` no autograd graph is kept."""
    if grad:
        return encode_tokens(model, adapter, inputs, mask, train_mode, generator)
    with torch.no_grad():
        return encode_tokens(model, adapter, inputs, mask, train_mode, generator)


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamWState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> AdamWState:
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for g in grads:
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite gradient passed to adamw_step")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2_sqrt = math.sqrt(1.0 - beta2 ** state.step)
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if p.shape != g.shape:
                raise ValueError(f"param/grad shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
            p.mul_(1.0 - lr * weight_decay)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v.sqrt() / bc2_sqrt).add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class AdamW:
    """Thin holder pairing a parameter list with its :class:`AdamWState`."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state = AdamWState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)


def model_fingerprint(model: BaseModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, buf in model.named_buffers():
        h.update(name.encode())
        h.update(buf.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: BaseModel, adapter: LoraAdapter | None = None,
                    heads: list[ClassifierHead] | None = None) -> None:
    tensors = {f"base.{name}": buf.detach().cpu().numpy() for name, buf in model.named_buffers()}
    if adapter is not None:
        tensors["adapter.config"] = np.array([adapter.rank, adapter.alpha, adapter.dropout_p])
        for i, (a, b) in enumerate(zip(adapter.A, adapter.B)):
            tensors[f"adapter.{i}.A"] = a.detach().cpu().numpy()
            tensors[f"adapter.{i}.B"] = b.detach().cpu().numpy()
    for t, head in enumerate(heads or []):
        tensors[f"head.{t}.weight"] = head.weight.detach().cpu().numpy()
        tensors[f"head.{t}.bias"] = head.bias.detach().cpu().numpy()
    write_checkpoint(path, tensors, KIND_MODEL)


def load_checkpoint(path):
    """Returns (model, adapter or None, heads)."""
    _, tensors = read_checkpoint(path, expected_kind=KIND_MODEL)
    try:
        W0, W1 = tensors["base.W0"], tensors["base.W1"]
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc}", 0) from None
    model = BaseModel(d_in=W0.shape[1], d=W0.shape[0])
    for name in ("W0", "b0", "W1", "b1"):
        getattr(model, name).copy_(torch.from_numpy(tensors[f"base.{name}"]))
    adapter = None
    if "adapter.config" in tensors:
        rank, alpha, p = tensors["adapter.config"].tolist()
        adapter = LoraAdapter(model.layer_shapes(), int(rank), alpha, p)
        with torch.no_grad():
            for i in range(len(adapter.A)):
                adapter.A[i].copy_(torch.from_numpy(tensors[f"adapter.{i}.A"]))
                adapter.B[i].copy_(torch.from_numpy(tensors[f"adapter.{i}.B"]))
    heads = []
    t = 0
    while f"head.{t}.weight" in tensors:
        w = torch.from_numpy(tensors[f"head.{t}.weight"])
        head = ClassifierHead(w.shape[0], w.shape[1])
        with torch.no_grad():
            head.weight.copy_(w)
            head.bias.copy_(torch.from_numpy(tensors[f"head.{t}.bias"]))
        heads.append(head)
        t += 1
    return model, adapter, heads
