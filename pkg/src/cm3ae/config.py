"""Model configuration dataclasses and the ``paper`` / ``toy`` presets."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .exceptions import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 8
    dim: int = 512
    heads: int = 8
    mlp_ratio: float = 4.0
    # LayerNorm before the pixel head; off only for sanity configurations.
    final_norm: bool = True

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description.

    ``voxel_count`` must be a multiple of the patch count; each voxel is
    ``events_per_voxel`` events of ``attrs_per_event`` values (x, y, t, p).
    """

    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    voxel_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    voxel_count: int = 1960
    events_per_voxel: int = 14
    attrs_per_event: int = 4
    dedicated_fusion_decoder: bool = False
    representation: str = "cls"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.voxel_count % self.num_patches:
            raise ConfigError(
                f"voxel_count {self.voxel_count} not divisible by {self.num_patches} groups"
            )
        if self.representation not in ("cls", "mean"):
            raise ConfigError(f"unknown representation {self.representation!r}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def voxel_record_width(self):
        return self.events_per_voxel * self.attrs_per_event

    @property
    def voxel_group_width(self):
        return (self.voxel_count // self.num_patches) * self.voxel_record_width

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["voxel_encoder"] = EncoderConfig(**d["voxel_encoder"])
        d["decoder"] = DecoderConfig(**d["decoder"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def paper_config(**overrides):
    """ViT-B/16 encoders (12 x 768), 8 x 512 decoders, 224px input."""
    return ModelConfig(**overrides)


def toy_config(**overrides):
    """Desk-scale preset: 64px images, 16 patches, 2 x 64 encoders, 1 x 32 decoders."""
    base = dict(
        image_size=64,
        patch_size=16,
        encoder=EncoderConfig(depth=2, dim=64, heads=2),
        voxel_encoder=EncoderConfig(depth=2, dim=64, heads=2),
        decoder=DecoderConfig(depth=1, dim=32, heads=2),
        voxel_count=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"paper": paper_config, "toy": toy_config}


def preset(name, **overrides):
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
