import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from saefd.distill import cosine_loss, fd_loss, magnitude_loss, raw_mse_loss
from saefd.sae import GatedSae, encode_pre_relu

F64 = torch.float64


def t(v):
    return torch.tensor(v, dtype=F64)


def random_sae(d, D, seed):
    sae = GatedSae(d, D, seed=seed).to(F64)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in (sae.b_gate, sae.b_enc, sae.b_dec):
            p.normal_(0, 0.3, generator=g)
    return sae.freeze()


def test_cosine_hand_cases():
    one = torch.ones(1, 1)
    loss, used = cosine_loss(t([[[1.0, 0.0]]]), t([[[0.0, 1.0]]]), one)
    assert loss.item() == pytest.approx(1.0, abs=1e-12) and used == 1
    loss, _ = cosine_loss(t([[[0.3, -2.0]]]), t([[[-0.3, 2.0]]]), one)
    assert loss.item() == pytest.approx(2.0, abs=1e-12)
    anc = torch.randn(2, 3, 5, dtype=F64)
    loss, used = cosine_loss(2.5 * anc, anc, torch.ones(2, 3), threshold_frac=0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12) and used == 6


def test_cosine_gate_example():
    anc = t([[[10.0, 0.0], [0.0, 10.0], [0.5, 0.0]]])
    curr = t([[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    loss, used = cosine_loss(curr, anc, torch.ones(1, 3))
    # median norm 10, cutoff 1.0: token 3 is dropped; token 1 gives 0, token 2 gives 1
    assert used == 2
    assert loss.item() == pytest.approx(0.5, abs=1e-12)


def test_cosine_no_eligible_tokens_and_padding():
    anc = torch.zeros(1, 2, 3, dtype=F64)
    curr = torch.randn(1, 2, 3, dtype=F64, requires_grad=True)
    loss, used = cosine_loss(curr, anc, torch.ones(1, 2))
    assert used == 0 and loss.item() == 0.0
    loss.backward()
    assert torch.equal(curr.grad, torch.zeros_like(curr))
    with pytest.raises(ValueError):
        cosine_loss(curr, anc, torch.zeros(1, 2))


def test_magnitude_hand_cases():
    anc = t([[[-2.0, 3.0, 0.0, 1.0]]])
    curr = t([[[5.0, 2.0, -1.0, 1.0]]])
    assert magnitude_loss(curr, anc, torch.relu(anc), torch.ones(1, 1)).item() == pytest.approx(0.5)
    assert magnitude_loss(anc, anc, torch.relu(anc), torch.ones(1, 1)).item() == 0.0
    # a second token with an empty active set contributes 0 but still counts in the average
    anc2 = torch.cat([anc, t([[[-1.0, -1.0, 0.0, -3.0]]])], dim=1)
    curr2 = torch.cat([curr, t([[[9.0, 9.0, 9.0, 9.0]]])], dim=1)
    value = magnitude_loss(curr2, anc2, torch.relu(anc2), torch.ones(1, 2)).item()
    assert value == pytest.approx(0.25)
    with pytest.raises(ValueError):
        magnitude_loss(curr, anc, anc, torch.ones(1, 1))


def test_raw_mse_cases():
    a = torch.randn(2, 3, 4)
    assert raw_mse_loss(a, a, torch.ones(2, 3)).item() == 0.0
    assert raw_mse_loss(t([[[1.0, -1.0]]]), t([[[0.0, 0.0]]]), torch.ones(1, 1)).item() == 1.0
    mask = torch.tensor([[1.0, 1.0, 0.0]])
    b = a[:1].clone()
    c = b.clone()
    c[0, 2] += 100.0
    assert raw_mse_loss(c, b, mask).item() == 0.0
    with pytest.raises(ValueError):
        raw_mse_loss(a, a[:, :2], torch.ones(2, 3))


def test_fd_identity_and_decomposition():
    sae = random_sae(4, 16, 0)
    h = torch.randn(3, 5, 4, dtype=F64)
    mask = torch.ones(3, 5)
    mask[1, 3:] = 0
    h16 = h.to(torch.float16)
    parts = fd_loss(sae, h16.to(F64), h16, mask)
    assert parts.total.item() == pytest.approx(0.0, abs=1e-12)

    h_curr = h + 0.3 * torch.randn_like(h)
    parts = fd_loss(sae, h_curr, h16, mask)
    f_curr = encode_pre_relu(sae, h_curr)
    f_anc = encode_pre_relu(sae, h16.to(F64))
    cos, used = cosine_loss(f_curr, f_anc, mask)
    mag = magnitude_loss(f_curr, f_anc, torch.relu(f_anc), mask)
    assert parts.cos_term.item() == cos.item() and parts.mag_term.item() == mag.item()
    assert parts.total.item() == (parts.cos_term + parts.mag_term).item()
    assert parts.tokens_used_cos == used <= parts.tokens_total == 13


def test_fd_gradient_never_reaches_sae():
    sae = random_sae(4, 16, 1)
    sae.requires_grad_(True)
    h_curr = torch.randn(2, 3, 4, dtype=F64, requires_grad=True)
    h_anc = torch.randn(2, 3, 4, dtype=F64)
    fd_loss(sae, h_curr, h_anc, torch.ones(2, 3)).total.backward()
    assert all(p.grad is None for p in sae.params())
    assert h_curr.grad is not None and h_curr.grad.abs().sum() > 0


@pytest.mark.parametrize("seed", range(20))
def test_fd_gradient_matches_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    d = int(torch.randint(2, 9, (1,), generator=g))
    D = int(torch.randint(2 * d, 33, (1,), generator=g))
    sae = random_sae(d, D, seed)
    h_anc = torch.randn(2, 3, d, generator=g, dtype=F64)
    h_curr = (h_anc + 0.5 * torch.randn(2, 3, d, generator=g, dtype=F64)).requires_grad_(True)
    mask = torch.tensor([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])

    def loss():
        return fd_loss(sae, h_curr, h_anc, mask).total

    (grad,) = torch.autograd.grad(loss(), [h_curr])
    assert relative_error(grad, central_difference(loss, h_curr.data)) < 1e-4


def test_scale_behaviour():
    f_anc = torch.randn(2, 4, 6, dtype=F64)
    f_curr = torch.randn(2, 4, 6, dtype=F64)
    mask = torch.ones(2, 4)
    base, _ = cosine_loss(f_curr, f_anc, mask)
    # power-of-two scaling is exact in floating point, so the loss must match bit for bit
    assert cosine_loss(4.0 * f_curr, f_anc, mask)[0].item() == base.item()
    assert cosine_loss(0.125 * f_curr, f_anc, mask)[0].item() == base.item()
    assert cosine_loss(3.0 * f_curr, f_anc, mask)[0].item() == pytest.approx(base.item(), rel=1e-12)
    post = torch.relu(f_anc)
    assert magnitude_loss(3.0 * f_curr, f_anc, post, mask).item() != magnitude_loss(f_curr, f_anc, post, mask).item()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50.0, 50.0))
def test_inactive_feature_perturbation_leaves_magnitude_unchanged(seed, delta):
    g = torch.Generator().manual_seed(seed)
    f_anc = torch.randn(2, 3, 8, generator=g, dtype=F64)
    f_curr = torch.randn(2, 3, 8, generator=g, dtype=F64)
    post = torch.relu(f_anc)
    mask = torch.ones(2, 3)
    perturbed = f_curr + delta * (post == 0).to(F64)
    assert magnitude_loss(perturbed, f_anc, post, mask).item() == magnitude_loss(f_curr, f_anc, post, mask).item()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.99), st.floats(0.0, 0.99))
def test_gate_monotone_in_threshold(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    f_anc = torch.randn(3, 5, 6, generator=g, dtype=F64) * torch.rand(3, 5, 1, generator=g, dtype=F64)
    f_curr = torch.randn(3, 5, 6, generator=g, dtype=F64)
    mask = (torch.rand(3, 5, generator=g) > 0.3).to(F64)
    mask[0, 0] = 1.0
    lo, hi = sorted((a, b))
    assert cosine_loss(f_curr, f_anc, mask, hi)[1] <= cosine_loss(f_curr, f_anc, mask, lo)[1]
