"""scikit-learn compatible wrapper around pre-training and frozen-feature extraction."""
import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, read_model_config
from .config import preset
from .data import SamplePair
from .exceptions import ConfigError
from .training import TrainConfig, Trainer, build_model
from .validation import check_image_array, check_labels, check_pairs

MODES = ("rgb", "event", "rgb+event")


class CM3AEPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised RGB-Event pre-training as a scikit-learn transformer.

    ``fit`` runs masked-autoencoder pre-training on a sequence of
    :class:`~cm3ae.data.SamplePair`; ``transform`` returns frozen,
    mean-pooled encoder features so the result can feed any scikit-learn
    classifier.

    Parameters
    ----------
    preset : {"toy", "paper"}
    mask_ratio : float
    learning_rate : float
    weight_decay : float
    batch_size : int
    max_steps : int
        Optimizer steps; 0 keeps the random initialization.
    enable_mfrm, enable_mcl : bool
        Loss-term switches for the fusion reconstruction and contrastive terms.
    modality : {"rgb", "event", "rgb+event"}
        Which encoder(s) ``transform`` reads.
    use_fusion : bool
        In ``rgb+event`` mode, route both token sets through the fusion
        block instead of concatenating the two pooled vectors.
    random_state : int

    Attributes
    ----------
    model_ : CM3AE
    history_ : list of dict
        Per-step metrics of the last ``fit``.
    """

    def __init__(
        self,
        preset="toy",
        mask_ratio=0.75,
        learning_rate=2e-4,
        weight_decay=0.04,
        batch_size=8,
        max_steps=300,
        enable_mfrm=True,
        enable_mcl=True,
        modality="rgb",
        use_fusion=False,
        random_state=0,
    ):
        self.preset = preset
        self.mask_ratio = mask_ratio
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.enable_mfrm = enable_mfrm
        self.enable_mcl = enable_mcl
        self.modality = modality
        self.use_fusion = use_fusion
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            preset=self.preset,
            mask_ratio=self.mask_ratio,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            steps=self.max_steps,
            seed=self.random_state,
            enable_mfrm=self.enable_mfrm,
            enable_mcl=self.enable_mcl,
        )

    def fit(self, X, y=None):
        """Pre-train on ``X`` (sequence of SamplePair); ``y`` is ignored."""
        if self.modality not in MODES:
            raise ConfigError(f"modality must be one of {MODES}")
        cfg = self._train_config()
        model_config = preset(self.preset)
        pairs = check_pairs(
            X,
            size=model_config.image_size,
            require_voxels=self.enable_mfrm or self.enable_mcl,
            record_width=model_config.voxel_record_width,
        )
        trainer = Trainer(cfg, dataset=pairs, model_config=model_config)
        self.history_ = trainer.train() if self.max_steps else []
        self.model_ = trainer.model.eval()
        self.n_features_out_ = self._feature_dim()
        return self

    @classmethod
    def from_checkpoint(cls, path, groups=None, **params):
        """A fitted estimator whose weights come from a CMCK checkpoint.

        With ``groups`` only those parameter groups are loaded; the rest
        keep their seeded random initialization.
        """
        est = cls(**params)
        model_config = read_model_config(path)
        est.model_ = build_model(model_config, est.random_state)
        load_checkpoint(path, est.model_, groups=groups)
        est.model_.eval()
        est.history_ = []
        est.n_features_out_ = est._feature_dim()
        return est

    @classmethod
    def random_init(cls, model_config=None, **params):
        """A fitted estimator holding an untrained, seeded model (probe baseline)."""
        est = cls(**params)
        est.model_ = build_model(model_config or preset(est.preset), est.random_state).eval()
        est.history_ = []
        est.n_features_out_ = est._feature_dim()
        return est

    def _feature_dim(self):
        cfg = self.model_.config
        if self.modality == "rgb+event":
            return cfg.decoder.dim if self.use_fusion else 2 * cfg.encoder.dim
        return cfg.encoder.dim

    def _split_input(self, X):
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], SamplePair):
            size = self.model_.config.image_size
            pairs = check_pairs(X, size=size)
            return np.stack([p.rgb for p in pairs]), np.stack([p.event for p in pairs])
        if self.modality == "rgb+event":
            raise ConfigError("rgb+event features need SamplePair inputs")
        return check_image_array(X, size=self.model_.config.image_size), None

    def transform(self, X, batch_size=64):
        """Frozen mean-pooled features, shape ``(n_samples, n_features_out_)``.

        ``X`` is a sequence of SamplePair, or an ``(n, H, W, 3)`` image
        array for the single-modality modes.
        """
        check_is_fitted(self, "model_")
        a, b = self._split_input(X)
        if self.modality == "event" and b is not None:
            a = b
        model, feats = self.model_.eval(), []
        dtype = next(model.parameters()).dtype
        for i in range(0, len(a), batch_size):
            x = torch.as_tensor(a[i : i + batch_size], dtype=dtype)
            if self.modality == "rgb+event":
                e = torch.as_tensor(b[i : i + batch_size], dtype=dtype)
                if self.use_fusion:
                    f = model.fused_features(x, e)
                else:
                    f = torch.cat([model.features(x, "rgb"), model.features(e, "event")], dim=1)
            else:
                f = model.features(x, self.modality)
            feats.append(f.double().numpy())
        return np.concatenate(feats, axis=0)


def linear_probe(train_features, train_labels, test_features, test_labels, random_state=0):
    """Fit a standardized logistic-regression probe; returns top-1 test accuracy."""
    check_labels(train_labels, len(train_features))
    clf = make_pipeline(
        StandardScaler(),
        LogisticRegression(max_iter=2000, random_state=random_state),
    )
    clf.fit(train_features, train_labels)
    return float(clf.score(test_features, test_labels))


def probe_accuracy(estimator, pairs, test_size=0.3, random_state=0):
    """Hold-out linear-probe accuracy of ``estimator``'s frozen features on labeled pairs."""
    labels = check_labels([p.label for p in pairs], len(pairs))
    idx_train, idx_test = train_test_split(
        np.arange(len(pairs)), test_size=test_size, random_state=random_state, stratify=labels
    )
    feats = estimator.transform(list(pairs))
    return linear_probe(
        feats[idx_train], labels[idx_train], feats[idx_test], labels[idx_test], random_state
    )
