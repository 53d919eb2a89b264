import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cm3ae import oracles
from cm3ae.exceptions import InputError, IntegrityError
from cm3ae.gradcheck import central_difference
from cm3ae.layers import CLS_POSITION, TokenSequence
from cm3ae.mcl import (
    ContrastiveScale,
    contrastive_logits,
    extract_representation,
    info_nce_loss,
    normalize_features,
    total_contrastive_loss,
    total_loss,
)


def _unit(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    return normalize_features(torch.randn(n, d, generator=g, dtype=torch.float64))


# -- representation ----------------------------------------------------------------


def test_cls_extraction():
    tokens = torch.randn(2, 197, 512)
    pos = torch.cat([torch.full((2, 1), CLS_POSITION), torch.arange(196).expand(2, -1)], dim=1)
    seq = TokenSequence(tokens, pos)
    rep = extract_representation(seq)
    assert rep.shape == (2, 512)
    assert torch.equal(rep, tokens[:, 0])
    assert torch.equal(extract_representation(seq, "mean"), tokens[:, 1:].mean(1))


def test_identical_sequences_identical_reps():
    t = torch.randn(1, 5, 8)
    pos = torch.tensor([[CLS_POSITION, 0, 1, 2, 3]])
    a = extract_representation(TokenSequence(t, pos))
    b = extract_representation(TokenSequence(t.clone(), pos))
    assert torch.equal(a, b)


def test_missing_cls():
    with pytest.raises(IntegrityError):
        extract_representation(TokenSequence(torch.randn(1, 3, 4), torch.tensor([[0, 1, 2]])))


def test_representation_depends_on_decoder(toy_model, toy_batch):
    rgb, event, voxels, plans = toy_batch
    out = toy_model(rgb, event, voxels, plans, enable_mfrm=False, enable_mcl=True)
    out.reps["rgb"].sum().backward()
    grads = [p.grad for p in toy_model.rgb_decoder.blocks.parameters()]
    assert any(g is not None and g.abs().max() > 0 for g in grads)


# -- normalization -------------------------------------------------------------------


def test_normalize_345():
    out = normalize_features(torch.tensor([[3.0, 4.0]]))
    assert torch.allclose(out, torch.tensor([[0.6, 0.8]]))


def test_normalize_idempotent():
    x = _unit(4, 6, 0)
    assert torch.allclose(normalize_features(x), x, atol=1e-6)


def test_normalize_random_batch_unit_norms():
    x = normalize_features(torch.randn(32, 16))
    assert torch.allclose(x.norm(dim=1), torch.ones(32), atol=1e-6)


def test_normalize_rejects_zero_row():
    with pytest.raises(InputError):
        normalize_features(torch.tensor([[0.0, 0.0], [1.0, 0.0]]))


# -- logits --------------------------------------------------------------------------


def test_identical_rows_diagonal_equals_scale():
    a = _unit(5, 8, 1)
    lg, _ = contrastive_logits(a, a, 14.0)
    assert torch.allclose(lg.diagonal(), torch.full((5,), 14.0, dtype=torch.float64))


def test_logits_linear_in_scale():
    a, b = _unit(4, 8, 2), _unit(4, 8, 3)
    lg1, _ = contrastive_logits(a, b, 3.0)
    lg2, _ = contrastive_logits(a, b, 6.0)
    assert torch.equal(lg2, 2 * lg1)


def test_logits_match_dot_product_oracle():
    a, b = _unit(8, 12, 4), _unit(8, 12, 5)
    lg, _ = contrastive_logits(a, b, 7.5)
    np.testing.assert_allclose(lg.numpy(), oracles.logits(a, b, 7.5), atol=1e-6)


def test_transpose_identity_exact():
    a, b = _unit(6, 8, 6), _unit(6, 8, 7)
    lg_ab, lg_ba = contrastive_logits(a, b, 11.0)
    assert torch.equal(lg_ba, lg_ab.T)
    lg_ba_direct = 11.0 * (b @ a.T)
    assert torch.equal(lg_ba_direct, lg_ab.T)


def test_logits_shape_mismatch():
    with pytest.raises(InputError):
        contrastive_logits(_unit(3, 4, 0), _unit(4, 4, 0), 1.0)


# -- InfoNCE ---------------------------------------------------------------------------


@pytest.mark.parametrize("n, c", [(2, 0.0), (5, 3.3), (17, -100.0)])
def test_uniform_logits_give_log_n(n, c):
    loss = info_nce_loss(torch.full((n, n), c, dtype=torch.float64))
    assert abs(loss.item() - math.log(n)) <= 1e-9


def test_saturated_logits():
    m = torch.full((4, 4), -1000.0, dtype=torch.float64)
    m.fill_diagonal_(1000.0)
    assert info_nce_loss(m).item() < 1e-6


def test_info_nce_matches_direct_formula():
    g = torch.Generator().manual_seed(9)
    m = torch.randn(6, 6, generator=g, dtype=torch.float64) * 3
    assert abs(info_nce_loss(m).item() - oracles.info_nce(m)) <= 1e-9


def test_info_nce_requires_negatives():
    with pytest.raises(InputError):
        info_nce_loss(torch.zeros(1, 1))
    with pytest.raises(InputError):
        info_nce_loss(torch.zeros(2, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10_000))
def test_row_shift_invariance(n, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.randn(n, n, generator=g, dtype=torch.float64)
    shift = torch.randn(n, 1, generator=g, dtype=torch.float64) * 50
    assert abs(info_nce_loss(m + shift).item() - info_nce_loss(m).item()) <= 1e-9


def test_symmetric_logits_equal_directions():
    a = _unit(6, 8, 10)
    b = a.clone()
    lg_re, lg_er = contrastive_logits(a, b, 9.0)
    assert abs(info_nce_loss(lg_re).item() - info_nce_loss(lg_er).item()) <= 1e-9


def test_asymmetric_logits_differ():
    lg_re, lg_er = contrastive_logits(_unit(6, 8, 11), _unit(6, 8, 12), 9.0)
    assert abs(info_nce_loss(lg_re).item() - info_nce_loss(lg_er).item()) > 1e-6


# -- totals --------------------------------------------------------------------------


def test_identical_batches_total():
    x = torch.randn(5, 8, dtype=torch.float64)
    total = total_contrastive_loss(x, x, x, 10.0).item()
    lg, _ = contrastive_logits(normalize_features(x), normalize_features(x), 10.0)
    l_re = info_nce_loss(lg).item()
    assert total == pytest.approx(4 * l_re, abs=1e-12)


def test_zero_scale_gives_four_log_n():
    x, y, z = (torch.randn(7, 4, dtype=torch.float64) for _ in range(3))
    assert abs(total_contrastive_loss(x, y, z, 0.0).item() - 4 * math.log(7)) <= 1e-9


def test_total_contrastive_matches_composition_oracle():
    g = torch.Generator().manual_seed(13)
    r, e, v = (torch.randn(6, 10, generator=g, dtype=torch.float64) for _ in range(3))
    got = total_contrastive_loss(r, e, v, 12.5).item()
    assert abs(got - oracles.contrastive_total(r, e, v, 12.5)) <= 1e-9


def test_permutation_invariance():
    g = torch.Generator().manual_seed(14)
    r, e, v = (torch.randn(6, 10, generator=g, dtype=torch.float64) for _ in range(3))
    perm = torch.randperm(6, generator=g)
    a = total_contrastive_loss(r, e, v, 5.0).item()
    b = total_contrastive_loss(r[perm], e[perm], v[perm], 5.0).item()
    assert abs(a - b) <= 1e-9


def test_total_loss():
    assert total_loss(0, 0, 0) == 0
    assert total_loss(1, 2, 3) == 6


def test_total_loss_decomposition(toy_model, toy_batch):
    rgb, event, voxels, plans = toy_batch
    out = toy_model(rgb, event, voxels, plans)
    assert out.loss.item() == pytest.approx(out.l_m.item() + out.l_f.item() + out.l_cl.item(), abs=1e-6)
    recomputed = total_contrastive_loss(out.reps["rgb"], out.reps["event"], out.reps["voxel"], out.scale)
    assert recomputed.item() == pytest.approx(out.l_cl.item(), abs=1e-6)


# -- scale -----------------------------------------------------------------------------


def test_scale_init_and_clamp():
    s = ContrastiveScale()
    assert s().item() == pytest.approx(1 / 0.07, rel=1e-6)
    with torch.no_grad():
        s.log_scale.fill_(10.0)
    assert s().item() == 100.0


def test_log_scale_gradient_finite_difference():
    s = ContrastiveScale().double()
    g = torch.Generator().manual_seed(15)
    r, e, v = (torch.randn(5, 8, generator=g, dtype=torch.float64) for _ in range(3))
    fn = lambda: total_contrastive_loss(r, e, v, s())
    fn().backward()
    num = central_difference(fn, s.log_scale, (), 1e-4)
    assert abs(num - s.log_scale.grad.item()) <= 1e-3 * abs(num)
