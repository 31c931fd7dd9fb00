"""Feature distillation losses in the SAE's pre-ReLU feature space, plus the raw-activation baseline."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .sae import GatedSae, gated_pre_relu

COS_EPS = 1e-8


@dataclass
class FdLossParts:
    cos_term: torch.Tensor
    mag_term: torch.Tensor
    total: torch.Tensor
    tokens_used_cos: int
    tokens_total: int


def _real_tokens(mask):
    real = mask > 0
    if not torch.any(real):
        raise ValueError("batch has no non-padding tokens")
    return real


def cosine_loss(f_curr, f_anc, mask, threshold_frac: float = 0.10):
    """Mean of ``1 - cos(f_curr, f_anc)`` over non-padding tokens whose anchor norm exceeds
    ``threshold_frac`` times the median anchor norm of the batch.

    Returns ``(loss, tokens_used)``; the loss is 0 when no token passes the gate.
    """
    if f_curr.shape != f_anc.shape:
        raise ValueError(f"shape mismatch {tuple(f_curr.shape)} vs {tuple(f_anc.shape)}")
    if not 0.0 <= threshold_frac < 1.0:
        raise ValueError("threshold_frac must lie in [0, 1)")
    real = _real_tokens(mask)
    anc_norm = f_anc.norm(dim=-1)
    median = torch.quantile(anc_norm[real].to(torch.float64), 0.5).to(anc_norm.dtype)
    eligible = real & (anc_norm > threshold_frac * median)
    used = int(eligible.sum())
    if used == 0:
        return (f_curr * 0.0).sum(), 0
    a, b = f_curr[eligible], f_anc[eligible]
    # norms are floored rather than shifted by COS_EPS so positive rescaling stays exact
    cos = (a * b).sum(dim=-1) / (a.norm(dim=-1).clamp(min=COS_EPS) * b.norm(dim=-1).clamp(min=COS_EPS))
    return (1.0 - cos).mean(), used


def magnitude_loss(f_curr, f_anc, f_anc_post, mask):
    """Squared error restricted to features active in the anchor (post-ReLU > 0).

    Each token's error is averaged over its own active set, tokens with no active
    feature contribute 0, and the result is averaged over all non-padding tokens.
    """
    if not (f_curr.shape == f_anc.shape == f_anc_post.shape):
        raise ValueError("magnitude_loss inputs must share one shape")
    if not torch.equal(f_anc_post, torch.relu(f_anc)):
        raise ValueError("f_anc_post must equal relu(f_anc)")
    real = _real_tokens(mask)
    active = (f_anc_post > 0).to(f_curr.dtype)
    n_active = active.sum(dim=-1)
    sq = ((f_curr - f_anc) ** 2 * active).sum(dim=-1)
    per_token = sq / n_active.clamp(min=1.0)
    return per_token[real].mean()


def fd_loss(sae: GatedSae, h_curr, h_anc, mask, threshold_frac: float = 0.10) -> FdLossParts:
    """Cosine + active-magnitude loss between current and anchor activations, both encoded
    by the frozen SAE.  Gradients reach ``h_curr`` only, never the SAE or the anchors.
    """
    frozen = [p.detach() for p in (sae.W_gate, sae.b_gate, sae.W_enc, sae.b_enc, sae.b_dec)]
    dtype = frozen[0].dtype
    f_curr = gated_pre_relu(h_curr.to(dtype), *frozen)
    with torch.no_grad():
        f_anc = gated_pre_relu(h_anc.detach().to(dtype), *frozen)
    cos_term, used = cosine_loss(f_curr, f_anc, mask, threshold_frac)
    mag_term = magnitude_loss(f_curr, f_anc, torch.relu(f_anc), mask)
    return FdLossParts(cos_term, mag_term, cos_term + mag_term, used, int((mask > 0).sum()))


def raw_mse_loss(h_curr, h_anc, mask):
    """Mean over non-padding tokens of the per-token mean squared activation difference."""
    if h_curr.shape != h_anc.shape:
        raise ValueError(f"shape mismatch {tuple(h_curr.shape)} vs {tuple(h_anc.shape)}")
    real = _real_tokens(mask)
    per_token = ((h_curr - h_anc.to(h_curr.dtype)) ** 2).mean(dim=-1)
    return per_token[real].mean()
