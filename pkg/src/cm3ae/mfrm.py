"""Multimodal fusion reconstruction: one shared transformer block over RGB,
aligned Event, and voxel tokens, decoded back to the RGB image."""
import torch
from torch import nn

from .decoders import assemble_decoder_input
from .exceptions import ConfigError, InputError, IntegrityError
from .layers import CLS_POSITION, EVENT, RGB, Block, TokenSequence


def select_shared_event_tokens(event_seq, shared_idx):
    """Pick the Event tokens sitting at the plan's shared positions.

    Parameters
    ----------
    event_seq : TokenSequence (B, v+1, D)
        Projected Event encoder output carrying ``position_ids``.
    shared_idx : LongTensor (B, s), ascending per row

    Returns
    -------
    TokenSequence (B, s, D) tagged ``EVENT``, CLS excluded.
    """
    shared_idx = torch.as_tensor(shared_idx, dtype=torch.long)
    if shared_idx.ndim == 1:
        shared_idx = shared_idx.unsqueeze(0).expand(event_seq.tokens.shape[0], -1)
    shared_idx = shared_idx.sort(dim=1).values
    hits = event_seq.position_ids.unsqueeze(-1) == shared_idx.unsqueeze(1)  # (B, L, s)
    hits = hits & (event_seq.position_ids != CLS_POSITION).unsqueeze(-1)
    found = hits.sum(dim=1)
    if (found != 1).any():
        raise IntegrityError("shared position missing from (or repeated in) the Event tokens")
    src = hits.to(torch.int8).argmax(dim=1)
    tokens = torch.gather(
        event_seq.tokens, 1, src.unsqueeze(-1).expand(-1, -1, event_seq.dim)
    )
    return TokenSequence(tokens, shared_idx).tagged(EVENT)


def check_no_leakage(seqs):
    """Every Event-tagged token must sit at a position visible to RGB.

    Raises ``IntegrityError`` otherwise. Voxel tokens carry group indices
    rather than grid positions and are not subject to this check.
    """
    rgb = [s for s in seqs if s.provenance is not None and bool((s.provenance == RGB).all())]
    if not rgb:
        raise IntegrityError("fusion input has no RGB sequence")
    rgb_pos = rgb[0].position_ids
    for s in seqs:
        if s.provenance is None:
            raise IntegrityError("token provenance missing")
        ev = s.provenance == EVENT
        if not ev.any():
            continue
        pos = s.position_ids[:, ev]
        inside = (pos.unsqueeze(-1) == rgb_pos.unsqueeze(1)).any(-1)
        if not bool(inside.all()) or bool((pos == CLS_POSITION).any()):
            raise IntegrityError("Event token at an RGB-masked position would leak masked content")


class FusionBlock(nn.Module):
    """A single pre-norm transformer block applied to concatenated modalities."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.dim = dim
        self.block = Block(dim, heads, mlp_ratio)

    def forward(self, *seqs, return_attn=False):
        return fuse_tokens(*seqs, block=self, return_attn=return_attn)


def fuse_tokens(*seqs, block, return_attn=False):
    """Concatenate sequences along the token axis (RGB first) and fuse.

    Returns a TokenSequence of the same total length whose provenance
    records which modality each slot came from.
    """
    for s in seqs:
        if s.dim != block.dim:
            raise ConfigError(f"token dim {s.dim} != fusion dim {block.dim}")
    check_no_leakage(seqs)
    tokens = torch.cat([s.tokens for s in seqs], dim=1)
    positions = torch.cat([s.position_ids for s in seqs], dim=1)
    provenance = torch.cat([s.provenance for s in seqs])
    if return_attn:
        out, attn = block.block(tokens, return_attn=True)
        return TokenSequence(out, positions, provenance), attn
    return TokenSequence(block.block(tokens), positions, provenance)


def keep_rgb_tokens(fused):
    if fused.provenance is None:
        raise IntegrityError("fused tokens carry no provenance")
    keep = fused.provenance == RGB
    return TokenSequence(fused.tokens[:, keep], fused.position_ids[:, keep], fused.provenance[keep])


def reconstruct_from_fused(fused, rgb_visible_idx, mask_token, decoder):
    """Drop non-RGB outputs, refill masked slots, decode to RGB pixels."""
    rgb = keep_rgb_tokens(fused)
    if not rgb.has_cls():
        raise IntegrityError("fused RGB tokens lost their CLS slot")
    assembled = assemble_decoder_input(
        rgb, rgb_visible_idx, decoder.num_patches, mask_token, decoder.pos_embed
    )
    pred, _ = decoder.decode_and_predict(assembled)
    return pred


def loss_fusion(pred_re, pred_rev, target_rgb, rgb_mask):
    """Squared RGB pixel error of both fused predictions over RGB-masked patches.

    Normalized by the masked pixel count summed over the two terms (twice
    the RGB-masked pixel count), mirroring the joint count of the
    dual-branch reconstruction loss.
    """
    if pred_re.shape != target_rgb.shape or pred_rev.shape != target_rgb.shape:
        raise InputError("fused prediction shape does not match the RGB target")
    per_branch = rgb_mask.sum() * target_rgb.shape[-1]
    if per_branch == 0:
        raise InputError("no masked pixels; fusion loss undefined")
    m = rgb_mask.unsqueeze(-1).to(target_rgb.dtype)
    sse = (((target_rgb - pred_re) ** 2) * m).sum() + (((target_rgb - pred_rev) ** 2) * m).sum()
    return sse / (2 * per_branch)


__all__ = [
    "FusionBlock",
    "check_no_leakage",
    "fuse_tokens",
    "keep_rgb_tokens",
    "loss_fusion",
    "reconstruct_from_fused",
    "select_shared_event_tokens",
]
