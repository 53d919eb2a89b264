"""Pixel decoders and the dual-modality masked reconstruction loss."""
import torch
from torch import nn

from .exceptions import ConfigError, InputError
from .layers import CLS_POSITION, TokenSequence, TransformerStack, trunc_normal_param


def assemble_decoder_input(visible, visible_idx, num_patches, mask_token, pos_table):
    """Scatter visible tokens onto the full patch grid, filling gaps with the mask token.

    Parameters
    ----------
    visible : TokenSequence (B, v+1, D)
        Projected encoder output, CLS first.
    visible_idx : LongTensor (B, v)
        Grid position of each non-CLS visible token.
    num_patches : int
    mask_token : Tensor (D,)
    pos_table : Tensor (num_patches + 1, D)

    Returns
    -------
    TokenSequence of length ``num_patches + 1`` with CLS at slot 0.
    """
    visible_idx = torch.as_tensor(visible_idx, dtype=torch.long)
    if visible_idx.ndim == 1:
        visible_idx = visible_idx.unsqueeze(0).expand(visible.tokens.shape[0], -1)
    b, v = visible_idx.shape
    if visible.length != v + 1:
        raise InputError(f"{visible.length} tokens for {v} positions plus CLS")
    if v and (visible_idx.min() < 0 or visible_idx.max() >= num_patches):
        raise InputError("visible position out of range")
    if v > 1 and (visible_idx.sort(dim=1).values.diff(dim=1) == 0).any():
        raise InputError("duplicate visible positions")
    d = visible.dim
    grid = mask_token.reshape(1, 1, d).expand(b, num_patches, d)
    grid = grid.scatter(1, visible_idx.unsqueeze(-1).expand(-1, -1, d), visible.tokens[:, 1:])
    tokens = torch.cat([visible.tokens[:, :1], grid], dim=1) + pos_table.unsqueeze(0)
    positions = torch.cat(
        [torch.full((b, 1), CLS_POSITION, dtype=torch.long), torch.arange(num_patches).expand(b, -1)],
        dim=1,
    )
    return TokenSequence(tokens, positions)


class PixelDecoder(nn.Module):
    """Transformer stack followed by a per-token linear head to patch pixels."""

    def __init__(self, num_patches, patch_dim, config):
        super().__init__()
        self.num_patches = num_patches
        self.config = config
        self.pos_embed = trunc_normal_param(num_patches + 1, config.dim)
        self.blocks = TransformerStack(config.dim, config.depth, config.heads, config.mlp_ratio)
        self.norm = nn.LayerNorm(config.dim) if config.final_norm else nn.Identity()
        self.head = nn.Linear(config.dim, patch_dim)

    def decode_and_predict(self, seq):
        """Return ``(pred, hidden)``.

        ``pred`` is (B, N, patch_dim) pixel predictions with the CLS slot
        dropped; ``hidden`` is the normalized (B, N+1, D) decoder state the
        head reads from.
        """
        if seq.length != self.num_patches + 1:
            raise ConfigError(f"decoder expects {self.num_patches + 1} tokens, got {seq.length}")
        if seq.dim != self.config.dim:
            raise ConfigError(f"token dim {seq.dim} != decoder dim {self.config.dim}")
        hidden = self.norm(self.blocks(seq.tokens))
        return self.head(hidden[:, 1:]), seq.replace(hidden)

    forward = decode_and_predict


def masks_from_plans(plans, modality="rgb"):
    """Boolean (B, N) tensor, True at masked positions."""
    n = plans[0].num_patches
    out = torch.ones(len(plans), n, dtype=torch.bool)
    for i, p in enumerate(plans):
        vis = p.rgb_visible if modality == "rgb" else p.event_visible
        out[i, torch.as_tensor(vis)] = False
    return out


def _masked_sse(pred, target, mask):
    if pred.shape != target.shape:
        raise InputError(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    err = (pred - target) ** 2
    return (err * mask.unsqueeze(-1).to(err.dtype)).sum()


def loss_masked_recon(pred_rgb, pred_event, target_rgb, target_event, rgb_mask, event_mask):
    """Mean squared pixel error over the masked patches of both modalities.

    The sum of squared errors over RGB-masked and Event-masked pixels is
    divided once by the total masked pixel count of both modalities.
    """
    patch_dim = pred_rgb.shape[-1]
    n_masked = (rgb_mask.sum() + event_mask.sum()) * patch_dim
    if n_masked == 0:
        raise InputError("no masked pixels; reconstruction loss undefined")
    sse = _masked_sse(pred_rgb, target_rgb, rgb_mask) + _masked_sse(pred_event, target_event, event_mask)
    return sse / n_masked

