import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cm3ae.data import SamplePair
from cm3ae.estimator import CM3AEPretrainer, linear_probe, probe_accuracy
from cm3ae.exceptions import ConfigError, InputError
import torch

from cm3ae.training import Trainer, TrainConfig


def _separable_pairs(n=40):
    pairs = []
    for i in range(n):
        level = 0.9 if i % 2 else 0.1
        img = np.full((64, 64, 3), level)
        pairs.append(SamplePair(img, 1.0 - img, np.zeros((32, 56), np.float32), i % 2))
    return pairs


def test_get_params_round_trip():
    est = CM3AEPretrainer(learning_rate=1e-3, modality="event")
    params = est.get_params()
    assert params["learning_rate"] == 1e-3 and params["modality"] == "event"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(max_steps=5)
    assert est.max_steps == 5


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        CM3AEPretrainer().transform(np.zeros((1, 64, 64, 3)))


def test_fit_transform_shapes(toy_pairs):
    est = CM3AEPretrainer(max_steps=2, batch_size=4).fit(toy_pairs)
    assert len(est.history_) == 2
    assert est.transform(toy_pairs).shape == (4, 64)
    est.set_params(modality="rgb+event")
    assert est.transform(toy_pairs).shape == (4, 128)
    est.set_params(use_fusion=True)
    assert est.transform(toy_pairs).shape == (4, 32)


def test_transform_accepts_image_array(toy_pairs):
    est = CM3AEPretrainer.random_init()
    images = np.stack([p.rgb for p in toy_pairs])
    np.testing.assert_allclose(est.transform(images), est.transform(toy_pairs))
    with pytest.raises(InputError):
        est.transform(images * 2)
    with pytest.raises(InputError):
        est.transform(np.zeros((1, 32, 32, 3)))


def test_rgb_event_needs_pairs():
    est = CM3AEPretrainer.random_init(modality="rgb+event")
    with pytest.raises(ConfigError):
        est.transform(np.zeros((1, 64, 64, 3)))


def test_fit_validates(toy_pairs):
    with pytest.raises(ConfigError):
        CM3AEPretrainer(modality="depth").fit(toy_pairs)
    with pytest.raises(InputError):
        CM3AEPretrainer().fit([])
    bare = [SamplePair(p.rgb, p.event, None, p.label) for p in toy_pairs]
    with pytest.raises(InputError, match="voxels"):
        CM3AEPretrainer(max_steps=1).fit(bare)
    CM3AEPretrainer(max_steps=1, batch_size=4, enable_mfrm=False, enable_mcl=False).fit(bare)


def test_from_checkpoint_matches_trainer(tmp_path, toy_pairs):
    tr = Trainer(TrainConfig(steps=2, batch_size=4, out_dir=str(tmp_path)), dataset=toy_pairs)
    tr.train()
    est = CM3AEPretrainer.from_checkpoint(tmp_path / "checkpoint.cmck")
    ref = tr.model.eval().features(torch.as_tensor(np.stack([p.rgb for p in toy_pairs]), dtype=torch.float32))
    np.testing.assert_array_equal(est.transform(toy_pairs), ref.double().numpy())


def test_fusion_partial_load(tmp_path, toy_pairs):
    tr = Trainer(TrainConfig(steps=2, batch_size=4, out_dir=str(tmp_path)), dataset=toy_pairs)
    tr.train()
    kw = dict(modality="rgb+event", use_fusion=True)
    loaded = CM3AEPretrainer.from_checkpoint(tmp_path / "checkpoint.cmck", groups={"fusion"}, **kw)
    plain = CM3AEPretrainer.random_init(**kw)
    a, b = loaded.transform(toy_pairs), plain.transform(toy_pairs)
    assert a.shape == b.shape and not np.array_equal(a, b)


@pytest.mark.parametrize("pretrained", [False, True])
def test_separable_two_class_probe(pretrained, toy_pairs):
    est = (CM3AEPretrainer(max_steps=3, batch_size=4).fit(toy_pairs) if pretrained
           else CM3AEPretrainer.random_init())
    for mode in ("rgb", "event", "rgb+event"):
        est.modality = mode
        assert probe_accuracy(est, _separable_pairs()) == 1.0


def test_probe_needs_two_classes():
    pairs = _separable_pairs(10)
    pairs = [SamplePair(p.rgb, p.event, p.voxels, 0) for p in pairs]
    with pytest.raises(InputError, match="2 classes"):
        probe_accuracy(CM3AEPretrainer.random_init(), pairs)
    with pytest.raises(InputError):
        linear_probe(np.zeros((3, 2)), [0, 0, 0], np.zeros((1, 2)), [0])
