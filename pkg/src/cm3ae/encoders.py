"""Token embedding and transformer encoders for image patches and event voxels."""
import numpy as np
import torch
from torch import nn

from .exceptions import ConfigError, InputError
from .layers import CLS_POSITION, TokenSequence, TransformerStack, trunc_normal_param

# column offsets of the per-event attributes inside a voxel record
ATTR_X, ATTR_Y, ATTR_T, ATTR_P = 0, 1, 2, 3


def _with_cls(tokens, cls_token, positions):
    b = tokens.shape[0]
    tokens = torch.cat([cls_token.expand(b, -1, -1), tokens], dim=1)
    cls_pos = torch.full((b, 1), CLS_POSITION, dtype=torch.long)
    return tokens, torch.cat([cls_pos, positions], dim=1)


class ImageEncoder(nn.Module):
    """Patch embedding plus a modality-specific transformer stack.

    The 16x16 stride-16 convolution of a ViT is a linear map on the
    flattened patch, so it is implemented as ``nn.Linear``.
    """

    def __init__(self, num_patches, patch_dim, config):
        super().__init__()
        self.num_patches = num_patches
        self.config = config
        self.patch_embed = nn.Linear(patch_dim, config.dim)
        self.cls_token = trunc_normal_param(1, 1, config.dim)
        self.pos_embed = trunc_normal_param(num_patches + 1, config.dim)
        self.blocks = TransformerStack(config.dim, config.depth, config.heads, config.mlp_ratio)

    def embed_visible_patches(self, patches, visible_idx):
        """Embed the visible patches, prepend CLS and add positional entries.

        Parameters
        ----------
        patches : Tensor (B, N, patch_dim)
        visible_idx : LongTensor (B, v)

        Returns
        -------
        TokenSequence of length ``v + 1``
        """
        visible_idx = torch.as_tensor(visible_idx, dtype=torch.long)
        if visible_idx.ndim == 1:
            visible_idx = visible_idx.unsqueeze(0).expand(patches.shape[0], -1)
        if visible_idx.numel() and (visible_idx.min() < 0 or visible_idx.max() >= patches.shape[1]):
            raise InputError("visible index out of range")
        gathered = torch.gather(
            patches, 1, visible_idx.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        )
        tokens, positions = _with_cls(self.patch_embed(gathered), self.cls_token, visible_idx)
        tokens = tokens + self.pos_embed[positions + 1]
        return TokenSequence(tokens, positions)

    def encode(self, seq, attn_layer=None):
        """Run the transformer stack; shape preserving."""
        if seq.dim != self.config.dim:
            raise ConfigError(f"token dim {seq.dim} != encoder dim {self.config.dim}")
        if attn_layer is None:
            return seq.replace(self.blocks(seq.tokens))
        out, attn = self.blocks(seq.tokens, attn_layer=attn_layer)
        return seq.replace(out), attn

    def forward(self, patches, visible_idx):
        return self.encode(self.embed_visible_patches(patches, visible_idx))


def project_tokens(seq, projection):
    """Apply a per-token linear map (encoder width -> decoder width)."""
    if seq.dim != projection.in_features:
        raise ConfigError(f"token dim {seq.dim} != projection input {projection.in_features}")
    return seq.replace(projection(seq.tokens))


def resample_voxels(raw, count, rng):
    """Return exactly ``count`` voxel records drawn from ``raw``.

    Equal size passes through unchanged; fewer records are padded by
    uniform sampling with replacement; more are subsampled uniformly
    without replacement (original order kept).
    """
    raw = np.asarray(raw)
    n = len(raw)
    if n == 0:
        raise InputError("cannot resample an empty voxel set")
    if n == count:
        return raw.copy()
    if n < count:
        pad = rng.integers(0, n, size=count - n)
        return np.concatenate([raw, raw[pad]], axis=0)
    keep = np.sort(rng.choice(n, size=count, replace=False))
    return raw[keep]


def voxel_sort_keys(records, events_per_voxel, attrs_per_event):
    """Mean (t, y, x) of each voxel's events; shape (..., V, 3)."""
    ev = records.reshape(*records.shape[:-1], events_per_voxel, attrs_per_event)
    means = ev.mean(-2)
    return means[..., [ATTR_T, ATTR_Y, ATTR_X]]


def group_voxels(records, groups, events_per_voxel, attrs_per_event):
    """Sort voxels by (t, y, x) and concatenate contiguous runs into groups.

    Parameters
    ----------
    records : Tensor (B, V, E*A)
    groups : int

    Returns
    -------
    Tensor (B, groups, (V/groups)*E*A)
    """
    b, v, width = records.shape
    if v % groups:
        raise ConfigError(f"{v} voxels cannot be split into {groups} equal groups")
    keys = voxel_sort_keys(records, events_per_voxel, attrs_per_event)
    # lexicographic sort via successive stable sorts, least significant key first
    order = torch.arange(v).expand(b, v)
    for col in (2, 1, 0):
        k = torch.gather(keys[..., col], 1, order)
        idx = torch.sort(k, dim=1, stable=True).indices
        order = torch.gather(order, 1, idx)
    ordered = torch.gather(records, 1, order.unsqueeze(-1).expand(-1, -1, width))
    return ordered.reshape(b, groups, (v // groups) * width)


class VoxelEncoder(nn.Module):
    """Groups of voxels -> linear token embedding -> transformer stack."""

    def __init__(self, groups, group_width, config, events_per_voxel=14, attrs_per_event=4):
        super().__init__()
        self.groups = groups
        self.config = config
        self.events_per_voxel = events_per_voxel
        self.attrs_per_event = attrs_per_event
        self.token_embed = nn.Linear(group_width, config.dim)
        self.cls_token = trunc_normal_param(1, 1, config.dim)
        self.pos_embed = trunc_normal_param(groups + 1, config.dim)
        self.blocks = TransformerStack(config.dim, config.depth, config.heads, config.mlp_ratio)

    def tokenize(self, voxels):
        """(B, V, E*A) records -> TokenSequence of length ``groups + 1``."""
        grouped = group_voxels(voxels, self.groups, self.events_per_voxel, self.attrs_per_event)
        if grouped.shape[-1] != self.token_embed.in_features:
            raise ConfigError(
                f"group width {grouped.shape[-1]} != embedding input {self.token_embed.in_features}"
            )
        b = grouped.shape[0]
        positions = torch.arange(self.groups).expand(b, -1)
        tokens, positions = _with_cls(self.token_embed(grouped), self.cls_token, positions)
        tokens = tokens + self.pos_embed.unsqueeze(0)
        return TokenSequence(tokens, positions)

    def encode(self, seq):
        if seq.dim != self.config.dim:
            raise ConfigError(f"token dim {seq.dim} != encoder dim {self.config.dim}")
        return seq.replace(self.blocks(seq.tokens))

    def forward(self, voxels):
        return self.encode(self.tokenize(voxels))
