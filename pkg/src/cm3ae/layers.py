"""Pre-norm transformer building blocks shared by encoders, decoders and fusion."""
from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import ConfigError

CLS_POSITION = -1

RGB, EVENT, VOXEL = 0, 1, 2
PROVENANCE_NAMES = {RGB: "rgb", EVENT: "event", VOXEL: "voxel"}


@dataclass
class TokenSequence:
    """A batch of token sequences with bookkeeping.

    Attributes
    ----------
    tokens : Tensor of shape (B, L, D)
    position_ids : LongTensor of shape (B, L)
        Original patch-grid index of each token, ``CLS_POSITION`` for CLS.
    provenance : LongTensor of shape (L,), optional
        Modality tag per token (``RGB``, ``EVENT`` or ``VOXEL``).
    """

    tokens: torch.Tensor
    position_ids: torch.Tensor
    provenance: torch.Tensor = None

    @property
    def length(self):
        return self.tokens.shape[1]

    @property
    def dim(self):
        return self.tokens.shape[2]

    def has_cls(self):
        return bool((self.position_ids[:, 0] == CLS_POSITION).all())

    def replace(self, tokens):
        return TokenSequence(tokens, self.position_ids, self.provenance)

    def tagged(self, tag):
        prov = torch.full((self.length,), tag, dtype=torch.long)
        return TokenSequence(self.tokens, self.position_ids, prov)


def init_weights(module):
    """Truncated normal (std 0.02) for linear weights, zero biases, unit norms."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def trunc_normal_param(*shape):
    p = nn.Parameter(torch.empty(*shape))
    nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
    return p


class Attention(nn.Module):
    """Multi-head scaled dot-product self-attention with softmax over keys."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn=False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """``x + attn(norm(x))`` followed by ``x + mlp(norm(x))``."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, return_attn=False):
        if return_attn:
            a, attn = self.attn(self.norm1(x), return_attn=True)
        else:
            a, attn = self.attn(self.norm1(x)), None
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return (x, attn) if return_attn else x


class TransformerStack(nn.Module):
    """``depth`` pre-norm blocks; depth 0 is the identity map."""

    def __init__(self, dim, depth, heads, mlp_ratio=4.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))

    def __len__(self):
        return len(self.blocks)

    def forward(self, x, attn_layer=None):
        if x.shape[-1] != self.dim:
            raise ConfigError(f"token dim {x.shape[-1]} != stack dim {self.dim}")
        attn = None
        for i, blk in enumerate(self.blocks):
            if i == attn_layer:
                x, attn = blk(x, return_attn=True)
            else:
                x = blk(x)
        return (x, attn) if attn_layer is not None else x
