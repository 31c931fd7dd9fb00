"""Gated sparse autoencoder: gated encoding, decoding, L1-regularized training and diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .container import KIND_SAE, FormatError, read_checkpoint, write_checkpoint
from .model import AdamW

log = logging.getLogger(__name__)

PARAM_NAMES = ("W_gate", "b_gate", "W_enc", "b_enc", "W_dec", "b_dec")


class GatedSae(nn.Module):
    """``D`` features over ``d``-dim activations; row ``k`` of ``W_dec`` is feature ``k``'s direction."""

    def __init__(self, d: int, D: int, seed: int = 0):
        super().__init__()
        if d <= 0 or D < 2 * d:
            raise ValueError(f"need D >= 2*d > 0, got d={d}, D={D}")
        self.d, self.D = d, D
        gen = torch.Generator().manual_seed(int(seed) % (1 << 63))
        bound = 1.0 / math.sqrt(d)
        self.W_gate = nn.Parameter((torch.rand(D, d, generator=gen) * 2 - 1) * bound)
        self.W_enc = nn.Parameter((torch.rand(D, d, generator=gen) * 2 - 1) * bound)
        dec = torch.randn(D, d, generator=gen)
        self.W_dec = nn.Parameter(dec / dec.norm(dim=1, keepdim=True))
        self.b_gate = nn.Parameter(torch.zeros(D))
        self.b_enc = nn.Parameter(torch.zeros(D))
        self.b_dec = nn.Parameter(torch.zeros(d))

    @classmethod
    def from_params(cls, W_gate, b_gate, W_enc, b_enc, W_dec, b_dec) -> "GatedSae":
        """Wrap explicit parameter tensors; the expansion-factor check is skipped."""
        sae = cls.__new__(cls)
        nn.Module.__init__(sae)
        sae.D, sae.d = W_enc.shape
        for name, value in zip(PARAM_NAMES, (W_gate, b_gate, W_enc, b_enc, W_dec, b_dec)):
            setattr(sae, name, nn.Parameter(torch.as_tensor(value).clone()))
        return sae

    def params(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def freeze(self) -> "GatedSae":
        self.requires_grad_(False)
        return self

    @torch.no_grad()
    def renormalize_decoder(self) -> None:
        self.W_dec.div_(self.W_dec.norm(dim=1, keepdim=True))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.params():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def _check_dim(H, expected, what):
    if H.shape[-1] != expected:
        raise ValueError(f"{what}: last dim {H.shape[-1]} != {expected}")


def gated_pre_relu(H, W_gate, b_gate, W_enc, b_enc, b_dec):
    centered = H - b_dec
    gate = torch.sigmoid(centered @ W_gate.T + b_gate)
    magnitude = centered @ W_enc.T + b_enc
    return gate * magnitude


def encode_pre_relu(sae: GatedSae, H):
    """``sigmoid(W_gate(h - b_dec) + b_gate) * (W_enc(h - b_dec) + b_enc)``; differentiable in H."""
    _check_dim(H, sae.d, "encode_pre_relu")
    return gated_pre_relu(H.to(sae.W_enc.dtype), sae.W_gate, sae.b_gate, sae.W_enc, sae.b_enc, sae.b_dec)


def encode(sae: GatedSae, H):
    return torch.relu(encode_pre_relu(sae, H))


def decode(sae: GatedSae, F):
    """``sum_k F_k * W_dec[k] + b_dec``."""
    _check_dim(F, sae.D, "decode")
    return F @ sae.W_dec + sae.b_dec


def sae_loss(sae: GatedSae, H, l1_coeff: float = 1e-3):
    """(total, recon_mse, l1_term), each a batch mean; squared error is summed over dimensions."""
    if H.shape[0] == 0:
        raise ValueError("empty batch")
    f = encode(sae, H)
    recon = decode(sae, f)
    recon_mse = ((recon - H) ** 2).sum(dim=-1).mean()
    l1_term = l1_coeff * f.abs().sum(dim=-1).mean()
    return recon_mse + l1_term, recon_mse, l1_term


def variance_explained(sae: GatedSae, H) -> float:
    """1 - sum_j Var(residual_j) / sum_j Var(H_j) over a (..., d) tensor."""
    H = H.reshape(-1, H.shape[-1]).to(sae.W_enc.dtype)
    if H.shape[0] < 2:
        raise ValueError("variance_explained needs at least 2 samples")
    with torch.no_grad():
        resid = H - decode(sae, encode(sae, H))
        total_var = H.var(dim=0).sum()
        if total_var == 0:
            raise ValueError("input has zero variance; variance explained is undefined")
        return float(1.0 - resid.var(dim=0).sum() / total_var)


def l0_sparsity(F) -> float:
    """Mean number of strictly positive features per token."""
    F = F.reshape(-1, F.shape[-1])
    if F.shape[0] == 0:
        return 0.0
    return float((F > 0).sum(dim=-1).to(torch.float64).mean())


@dataclass
class SaeTrainConfig:
    l1_coeff: float = 1e-3
    lr: float = 3e-4
    epochs: int = 30
    batch_size: int = 128
    weight_decay: float = 0.0
    schedule: str = "cosine"

    def validate(self):
        if min(self.l1_coeff, self.lr, self.epochs, self.batch_size) <= 0:
            raise ValueError("SAE training settings must be positive")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` towards 0, evaluated before step ``step`` (0-based)."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def train_sae(sae: GatedSae, activations, config: SaeTrainConfig, seed: int = 0,
              holdout=None, log_every: int = 0) -> GatedSae:
    """Train ``sae`` in place on (N, d) activations and return it frozen.

    Decoder rows are renormalized to unit norm after every optimizer step.
    """
    config.validate()
    X = activations.reshape(-1, sae.d).to(sae.W_enc.dtype)
    n = X.shape[0]
    if n < config.batch_size:
        raise ValueError(f"corpus size {n} is smaller than batch_size {config.batch_size}")
    sae.requires_grad_(True)
    opt = AdamW(sae.params(), weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(int(seed) % (1 << 63))
    steps_per_epoch = n // config.batch_size
    total = steps_per_epoch * config.epochs
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            batch = X[order[b * config.batch_size:(b + 1) * config.batch_size]]
            loss, recon, l1 = sae_loss(sae, batch, config.l1_coeff)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"SAE loss became {loss.item()} at epoch {epoch}, step {step} "
                    f"(recon={recon.item()}, l1={l1.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(config.lr, step, total))
            sae.renormalize_decoder()
            step += 1
        if log_every and (epoch + 1) % log_every == 0:
            msg = f"sae epoch {epoch + 1}/{config.epochs} loss={loss.item():.5f}"
            if holdout is not None:
                msg += f" ve={variance_explained(sae, holdout):.4f}"
            log.info(msg)
    opt.zero_grad()
    return sae.freeze()


def save_sae(sae: GatedSae, path) -> None:
    write_checkpoint(path, {n: p.detach().cpu().numpy() for n, p in zip(PARAM_NAMES, sae.params())},
                     KIND_SAE)


def load_sae(path) -> GatedSae:
    _, tensors = read_checkpoint(path, expected_kind=KIND_SAE)
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise FormatError(f"SAE checkpoint missing {missing}", 0)
    D, d = tensors["W_enc"].shape
    sae = GatedSae(d, D)
    with torch.no_grad():
        for n in PARAM_NAMES:
            target = getattr(sae, n)
            if tuple(target.shape) != tensors[n].shape:
                raise FormatError(f"tensor {n} has shape {tensors[n].shape}", 0)
            target.copy_(torch.from_numpy(np.ascontiguousarray(tensors[n])))
    return sae.freeze()
