"""Cross-modal contrastive alignment (RGB<->Event, RGB<->Voxel) and the total objective."""
import math

import torch
from torch import nn

from .exceptions import InputError, IntegrityError

MAX_SCALE = 100.0


class ContrastiveScale(nn.Module):
    """Learnable logit scale stored in log space, clamped to at most 100."""

    def __init__(self, init=1 / 0.07):
        super().__init__()
        self.log_scale = nn.Parameter(torch.tensor(math.log(init)))

    def forward(self):
        return self.log_scale.exp().clamp(max=MAX_SCALE)


def extract_representation(seq, mode="cls"):
    """One vector per sample: the CLS slot, or the mean of the other tokens."""
    if not seq.has_cls():
        raise IntegrityError("sequence has no CLS slot to read a representation from")
    if mode == "cls":
        return seq.tokens[:, 0]
    if mode == "mean":
        return seq.tokens[:, 1:].mean(dim=1)
    raise ValueError(f"unknown representation mode {mode!r}")


def normalize_features(features):
    """Divide every row by its Euclidean norm; zero rows are rejected."""
    norms = features.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise InputError("zero-norm feature row cannot be normalized")
    return features / norms


def contrastive_logits(a, b, scale):
    """Return ``(scale * a @ b.T, scale * b @ a.T)`` for unit-norm rows."""
    if a.shape != b.shape:
        raise InputError(f"feature batches differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    lg_ab = scale * (a @ b.T)
    return lg_ab, lg_ab.T


def info_nce_loss(logits):
    """Mean cross-entropy of each row against its diagonal entry."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise InputError(f"expected square logits, got {tuple(logits.shape)}")
    if logits.shape[0] < 2:
        raise InputError("contrastive loss needs at least 2 samples (no negatives otherwise)")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_norm = shifted.exp().sum(dim=1).log()
    return (log_norm - shifted.diagonal()).mean()


def pair_loss(a, b, scale):
    """``(L_ab, L_ba)`` for one modality pair of raw (unnormalized) features."""
    lg_ab, lg_ba = contrastive_logits(normalize_features(a), normalize_features(b), scale)
    return info_nce_loss(lg_ab), info_nce_loss(lg_ba)


def total_contrastive_loss(rgb, event, voxel, scale):
    """RGB-Event and RGB-Voxel terms in both directions; no Event-Voxel term."""
    l_re, l_er = pair_loss(rgb, event, scale)
    l_rv, l_vr = pair_loss(rgb, voxel, scale)
    return l_re + l_er + l_rv + l_vr


def total_loss(l_m, l_f, l_cl):
    return l_m + l_f + l_cl
