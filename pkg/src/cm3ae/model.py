"""The complete pre-training network and its named parameter groups."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .decoders import PixelDecoder, assemble_decoder_input, loss_masked_recon, masks_from_plans
from .encoders import ImageEncoder, VoxelEncoder, project_tokens
from .exceptions import InputError
from .layers import RGB, VOXEL, init_weights, trunc_normal_param
from .masking import patchify
from .mcl import ContrastiveScale, extract_representation, total_contrastive_loss, total_loss
from .mfrm import (
    FusionBlock,
    fuse_tokens,
    loss_fusion,
    reconstruct_from_fused,
    select_shared_event_tokens,
)

# attribute prefix -> parameter group
PARAMETER_GROUPS = {
    "rgb_encoder": "rgb_encoder",
    "event_encoder": "event_encoder",
    "voxel_encoder": "voxel_encoder",
    "rgb_proj": "projections",
    "event_proj": "projections",
    "voxel_proj": "projections",
    "rgb_decoder": "rgb_decoder",
    "event_decoder": "event_decoder",
    "fused_decoder": "fused_decoder",
    "fusion": "fusion",
    "mask_token_rgb": "mask_tokens",
    "mask_token_event": "mask_tokens",
    "mask_token_fused": "mask_tokens",
    "logit_scale": "contrastive_scale",
}


@dataclass
class ForwardOutput:
    l_m: torch.Tensor
    l_f: torch.Tensor
    l_cl: torch.Tensor
    loss: torch.Tensor
    scale: torch.Tensor
    pred_rgb: torch.Tensor
    pred_event: torch.Tensor
    pred_re: torch.Tensor = None
    pred_rev: torch.Tensor = None
    fused_re: object = None
    fused_rev: object = None
    reps: dict = None

    def metrics(self):
        return {
            "L_m": self.l_m.item(),
            "L_f": self.l_f.item(),
            "L_cl": self.l_cl.item(),
            "L": self.loss.item(),
            "ls": self.scale.item(),
        }


def plan_tensors(plans):
    """Stack per-sample plans into (B, v), (B, v), (B, s) index tensors."""
    rgb = torch.as_tensor(np.stack([p.rgb_visible for p in plans]), dtype=torch.long)
    event = torch.as_tensor(np.stack([p.event_visible for p in plans]), dtype=torch.long)
    shared = torch.as_tensor(np.stack([p.shared for p in plans]), dtype=torch.long)
    return rgb, event, shared


class CM3AE(nn.Module):
    """Dual-branch masked autoencoder with fusion reconstruction and contrastive heads.

    Parameters
    ----------
    config : ModelConfig
    """

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        n, pd = config.num_patches, config.patch_dim
        enc, venc, dec = config.encoder, config.voxel_encoder, config.decoder
        self.rgb_encoder = ImageEncoder(n, pd, enc)
        self.event_encoder = ImageEncoder(n, pd, enc)
        self.voxel_encoder = VoxelEncoder(
            n, config.voxel_group_width, venc, config.events_per_voxel, config.attrs_per_event
        )
        self.rgb_proj = nn.Linear(enc.dim, dec.dim)
        self.event_proj = nn.Linear(enc.dim, dec.dim)
        self.voxel_proj = nn.Linear(venc.dim, dec.dim)
        self.rgb_decoder = PixelDecoder(n, pd, dec)
        self.event_decoder = PixelDecoder(n, pd, dec)
        if config.dedicated_fusion_decoder:
            self.fused_decoder = PixelDecoder(n, pd, dec)
        self.fusion = FusionBlock(dec.dim, dec.heads, dec.mlp_ratio)
        self.mask_token_rgb = trunc_normal_param(dec.dim)
        self.mask_token_event = trunc_normal_param(dec.dim)
        self.mask_token_fused = trunc_normal_param(dec.dim)
        self.logit_scale = ContrastiveScale()
        for name, child in self.named_children():
            if name != "logit_scale":
                child.apply(init_weights)

    @property
    def fusion_decoder(self):
        return self.fused_decoder if self.config.dedicated_fusion_decoder else self.rgb_decoder

    def parameter_groups(self):
        """Map group name -> list of (qualified name, parameter)."""
        groups = {}
        for name, p in self.named_parameters():
            groups.setdefault(PARAMETER_GROUPS[name.split(".")[0]], []).append((name, p))
        return groups

    @staticmethod
    def is_active(name, enable_mfrm=True, enable_mcl=True):
        """Whether parameter ``name`` receives gradient under the loss flags."""
        top = name.split(".")[0]
        if top in ("fusion", "fused_decoder", "mask_token_fused"):
            return enable_mfrm
        if top in ("voxel_encoder", "voxel_proj"):
            return enable_mfrm or enable_mcl
        if top == "logit_scale":
            return enable_mcl
        return True

    def active_parameters(self, enable_mfrm=True, enable_mcl=True):
        """Parameters touched by the enabled losses; the rest must stay frozen."""
        return [p for name, p in self.named_parameters()
                if self.is_active(name, enable_mfrm, enable_mcl)]

    # -- branches -----------------------------------------------------------

    def encode_images(self, rgb_patches, event_patches, rgb_idx, event_idx):
        rgb = self.rgb_encoder(rgb_patches, rgb_idx)
        event = self.event_encoder(event_patches, event_idx)
        return project_tokens(rgb, self.rgb_proj), project_tokens(event, self.event_proj)

    def decode(self, seq, visible_idx, decoder, mask_token):
        assembled = assemble_decoder_input(
            seq, visible_idx, decoder.num_patches, mask_token, decoder.pos_embed
        )
        return decoder.decode_and_predict(assembled)

    def forward(self, rgb, event, voxels=None, plans=None, enable_mfrm=True, enable_mcl=True):
        """Compute all enabled loss terms for a batch.

        Parameters
        ----------
        rgb, event : Tensor (B, H, W, C) with values in [0, 1]
        voxels : Tensor (B, V, E*A), required when either flag is on
        plans : list of MaskPlan, one per sample
        """
        if plans is None or len(plans) != rgb.shape[0]:
            raise InputError("one MaskPlan per sample is required")
        if (enable_mfrm or enable_mcl) and voxels is None:
            raise InputError("voxels are required when MFRM or MCL is enabled")
        p = self.config.patch_size
        rgb_patches, event_patches = patchify(rgb, p), patchify(event, p)
        rgb_idx, event_idx, shared_idx = plan_tensors(plans)
        rgb_mask, event_mask = masks_from_plans(plans, "rgb"), masks_from_plans(plans, "event")

        rgb_seq, event_seq = self.encode_images(rgb_patches, event_patches, rgb_idx, event_idx)
        pred_rgb, rgb_hidden = self.decode(rgb_seq, rgb_idx, self.rgb_decoder, self.mask_token_rgb)
        pred_event, event_hidden = self.decode(
            event_seq, event_idx, self.event_decoder, self.mask_token_event
        )
        l_m = loss_masked_recon(pred_rgb, pred_event, rgb_patches, event_patches, rgb_mask, event_mask)
        zero = l_m.new_zeros(())
        out = ForwardOutput(l_m, zero, zero, l_m, self.logit_scale().detach(), pred_rgb, pred_event)

        voxel_seq = None
        if enable_mfrm or enable_mcl:
            voxel_seq = project_tokens(self.voxel_encoder(voxels), self.voxel_proj)

        if enable_mfrm:
            rgb_tagged = rgb_seq.tagged(RGB)
            shared = select_shared_event_tokens(event_seq, shared_idx)
            fused_re = fuse_tokens(rgb_tagged, shared, block=self.fusion)
            fused_rev = fuse_tokens(rgb_tagged, shared, voxel_seq.tagged(VOXEL), block=self.fusion)
            dec = self.fusion_decoder
            out.pred_re = reconstruct_from_fused(fused_re, rgb_idx, self.mask_token_fused, dec)
            out.pred_rev = reconstruct_from_fused(fused_rev, rgb_idx, self.mask_token_fused, dec)
            out.fused_re, out.fused_rev = fused_re, fused_rev
            out.l_f = loss_fusion(out.pred_re, out.pred_rev, rgb_patches, rgb_mask)

        if enable_mcl:
            mode = self.config.representation
            reps = {
                "rgb": extract_representation(rgb_hidden, mode),
                "event": extract_representation(event_hidden, mode),
                "voxel": extract_representation(voxel_seq, mode),
            }
            scale = self.logit_scale()
            out.reps = reps
            out.scale = scale
            out.l_cl = total_contrastive_loss(reps["rgb"], reps["event"], reps["voxel"], scale)

        out.loss = total_loss(out.l_m, out.l_f, out.l_cl)
        return out

    # -- frozen feature extraction (probe / attention export) ----------------

    @torch.no_grad()
    def features(self, images, modality="rgb"):
        """Mean-pooled encoder output with every patch visible; (B, enc_dim)."""
        encoder = self.rgb_encoder if modality == "rgb" else self.event_encoder
        patches = patchify(images, self.config.patch_size)
        idx = torch.arange(self.config.num_patches)
        seq = encoder(patches, idx)
        return seq.tokens[:, 1:].mean(dim=1)

    @torch.no_grad()
    def fused_features(self, rgb, event):
        """Mean-pooled output of the fusion block over all RGB and Event tokens."""
        p, n = self.config.patch_size, self.config.num_patches
        idx = torch.arange(n)
        rgb_seq, event_seq = self.encode_images(patchify(rgb, p), patchify(event, p), idx, idx)
        b = rgb.shape[0]
        shared = select_shared_event_tokens(event_seq, idx.expand(b, -1))
        fused = fuse_tokens(rgb_seq.tagged(RGB), shared, block=self.fusion)
        return fused.tokens.mean(dim=1)
