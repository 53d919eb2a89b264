import json
import math

import pytest
import torch

from cm3ae.checkpoint import parameter_checksums
from cm3ae.exceptions import ConfigError, NonFiniteLossError
from cm3ae.training import METRICS_NAME, TrainConfig, Trainer, lr_at, make_optimizer, pretrain


def _cfg(tmp_path=None, **kw):
    base = dict(steps=6, batch_size=4, out_dir=str(tmp_path) if tmp_path else None)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -------------------------------------------------------------------------


def test_warmup_then_cosine():
    total, lr = 100, 1.0
    assert lr_at(0, total, lr, 0.05) == pytest.approx(0.2)
    assert lr_at(4, total, lr, 0.05) == pytest.approx(1.0)
    assert lr_at(5, total, lr, 0.05) == pytest.approx(1.0)
    mid = 5 + 95 / 2
    assert lr_at(int(mid), total, lr, 0.05) == pytest.approx(0.5 * (1 + math.cos(math.pi * 47 / 95)))
    assert lr_at(100, total, lr, 0.05) == pytest.approx(0.0, abs=1e-12)


def test_schedule_monotone_after_warmup():
    lrs = [lr_at(s, 200, 2e-4, 0.05) for s in range(200)]
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert max(lrs) == pytest.approx(2e-4)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(mask_ratio=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    TrainConfig(batch_size=1, enable_mcl=False)
    assert TrainConfig(batch_size=4, epochs=3).total_steps(10) == 9


def test_weight_decay_only_on_matrices(toy_pairs):
    tr = Trainer(_cfg(), dataset=toy_pairs)
    decay, no_decay = tr.optimizer.param_groups
    assert decay["weight_decay"] == 0.04 and no_decay["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in decay["params"])
    assert all(p.ndim < 2 for p in no_decay["params"])
    assert tr.optimizer.defaults["betas"] == (0.9, 0.95)


# -- loop -----------------------------------------------------------------------------


def test_metrics_log_fields(tmp_path, toy_pairs):
    pretrain(_cfg(tmp_path), dataset=toy_pairs)
    lines = (tmp_path / METRICS_NAME).read_text().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "L_m", "L_f", "L_cl", "L", "ls", "lr"}
    assert rec["L"] == pytest.approx(rec["L_m"] + rec["L_f"] + rec["L_cl"], rel=1e-5)
    assert (tmp_path / "checkpoint.cmck").exists()


def test_identical_seeds_identical_logs(tmp_path, toy_pairs):
    pretrain(_cfg(tmp_path / "a"), dataset=toy_pairs)
    pretrain(_cfg(tmp_path / "b"), dataset=toy_pairs)
    assert (tmp_path / "a" / METRICS_NAME).read_bytes() == (tmp_path / "b" / METRICS_NAME).read_bytes()


def test_synthetic_data_source(tmp_path):
    tr = pretrain(_cfg(tmp_path, steps=2, num_samples=4))
    assert len(tr.dataset) == 4 and tr.step == 2


def test_resume_matches_uninterrupted(tmp_path, toy_pairs):
    full = Trainer(_cfg(tmp_path / "full", steps=8), dataset=toy_pairs)
    ref = full.train()[-1]["L"]

    first = Trainer(_cfg(tmp_path / "split", steps=8), dataset=toy_pairs)
    first.train(until=4)
    second = pretrain(_cfg(tmp_path / "split", steps=8), dataset=toy_pairs, resume=True)
    assert second.history[0]["step"] == 4
    assert abs(second.history[-1]["L"] - ref) <= 1e-5


def test_checkpoint_every(tmp_path, toy_pairs):
    tr = Trainer(_cfg(tmp_path, steps=4, checkpoint_every=2), dataset=toy_pairs)
    tr.train(until=2)
    assert (tmp_path / "checkpoint.cmck").exists()


def test_non_finite_loss_names_term(toy_pairs):
    tr = Trainer(_cfg(), dataset=toy_pairs)
    with torch.no_grad():
        tr.model.logit_scale.log_scale.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="L_cl"):
        tr.train_step()


@pytest.mark.parametrize("mfrm, mcl", [(False, False), (True, False), (False, True), (True, True)])
def test_flag_gating(toy_pairs, mfrm, mcl):
    tr = Trainer(_cfg(steps=3, enable_mfrm=mfrm, enable_mcl=mcl), dataset=toy_pairs)
    before = {n: p.detach().clone() for n, p in tr.model.named_parameters()}
    records = tr.train()
    for name, p in tr.model.named_parameters():
        moved = not torch.equal(before[name], p.detach())
        if not tr.model.is_active(name, mfrm, mcl):
            assert not moved, name
    frozen_groups = {"fusion"} if not mfrm else set()
    if not mcl:
        frozen_groups.add("contrastive_scale")
    if not (mfrm or mcl):
        frozen_groups.add("voxel_encoder")
    # whole-group checksums stay stable for groups that are entirely inactive
    after = parameter_checksums(tr.model, frozen_groups)
    fresh = parameter_checksums(Trainer(_cfg(enable_mfrm=mfrm, enable_mcl=mcl), dataset=toy_pairs).model, frozen_groups)
    assert after == fresh
    for rec in records:
        assert (rec["L_f"] == 0.0) == (not mfrm)
        assert (rec["L_cl"] == 0.0) == (not mcl)
        assert rec["L_m"] > 0


def test_disabled_terms_absent_from_gradient(toy_batch, toy_model):
    rgb, event, voxels, plans = toy_batch
    out = toy_model(rgb, event, voxels, plans, enable_mfrm=False, enable_mcl=False)
    assert out.l_f.item() == 0.0 and out.l_cl.item() == 0.0
    out.loss.backward()
    for name, p in toy_model.named_parameters():
        if name.startswith(("fusion", "voxel_encoder", "logit_scale", "mask_token_fused")):
            assert p.grad is None or not p.grad.any(), name


def test_optimizer_holds_only_active_params(toy_model):
    opt = make_optimizer(toy_model, _cfg(enable_mfrm=False, enable_mcl=False))
    held = {id(p) for g in opt.param_groups for p in g["params"]}
    assert id(toy_model.logit_scale.log_scale) not in held
    assert id(toy_model.rgb_encoder.cls_token) in held
