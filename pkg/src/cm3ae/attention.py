"""CLS-to-patch attention maps from the image encoders, saved as grayscale PNGs."""
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import ConfigError
from .masking import patchify

MODALITIES = ("rgb", "event")


@torch.no_grad()
def cls_attention(model, image, modality, layer):
    """Head-averaged attention from CLS to every patch at block ``layer`` (0-based).

    ``image`` is a single ``(H, W, 3)`` array; returns a ``(gh, gw)`` float array.
    """
    encoder = model.rgb_encoder if modality == "rgb" else model.event_encoder
    depth = len(encoder.blocks)
    if not 0 <= layer < depth:
        raise ConfigError(f"layer {layer} out of range for an encoder of depth {depth}")
    cfg = model.config
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(image)[None], dtype=dtype)
    idx = torch.arange(cfg.num_patches)
    seq = encoder.embed_visible_patches(patchify(x, cfg.patch_size), idx)
    _, attn = encoder.encode(seq, attn_layer=layer)
    # attn: (1, heads, L, L) with CLS at slot 0
    row = attn[0, :, 0, 1:].mean(dim=0)
    return row.reshape(cfg.grid, cfg.grid).double().numpy()


def to_uint8(values):
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_attention(model, sample, layer, out_dir):
    """Write ``attn_rgb.png`` and ``attn_event.png`` for one SamplePair; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    paths = {}
    for modality in MODALITIES:
        amap = cls_attention(model, getattr(sample, modality), modality, layer)
        path = out_dir / f"attn_{modality}.png"
        Image.fromarray(to_uint8(amap), "L").save(path)
        paths[modality] = path
    return paths
