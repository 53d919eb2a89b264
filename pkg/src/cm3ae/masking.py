"""Patch decomposition and position-aligned random masking.

Patches are flattened rows -> columns -> channels, i.e. patch ``i`` of a
``(H, W, C)`` image covers grid cell ``(i // (W/p), i % (W/p))`` and its
vector is ``cell.reshape(-1)`` of the ``(p, p, C)`` pixel block.
"""
import math
from dataclasses import dataclass

import numpy as np
from einops import rearrange

from .exceptions import ConfigError, InputError

__all__ = [
    "MaskPlan",
    "patchify",
    "unpatchify",
    "plan_counts",
    "sample_mask_plan",
    "sample_mask_plans",
]


def patchify(image, patch_size):
    """Split ``(..., H, W, C)`` images into ``(..., N, p*p*C)`` patch rows.

    Works on numpy arrays and torch tensors alike.
    """
    if image.ndim < 3:
        raise InputError(f"expected (..., H, W, C) image, got shape {tuple(image.shape)}")
    h, w = image.shape[-3], image.shape[-2]
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise InputError(
            f"image size {h}x{w} is not divisible by patch size {patch_size}"
        )
    return rearrange(
        image, "... (gh p1) (gw p2) c -> ... (gh gw) (p1 p2 c)", p1=patch_size, p2=patch_size
    )


def unpatchify(patches, patch_size, grid=None, channels=3):
    """Inverse of :func:`patchify`.

    Parameters
    ----------
    patches : array of shape (..., N, p*p*C)
    patch_size : int
    grid : tuple of int, optional
        ``(rows, cols)`` of the patch grid. Defaults to a square grid.
    channels : int
    """
    n, dim = patches.shape[-2], patches.shape[-1]
    if dim != patch_size * patch_size * channels:
        raise InputError(
            f"patch width {dim} != {patch_size}*{patch_size}*{channels}"
        )
    if grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise InputError(f"{n} patches do not form a square grid")
        grid = (side, side)
    if grid[0] * grid[1] != n:
        raise InputError(f"{n} patches inconsistent with grid {grid}")
    return rearrange(
        patches,
        "... (gh gw) (p1 p2 c) -> ... (gh p1) (gw p2) c",
        gh=grid[0],
        gw=grid[1],
        p1=patch_size,
        p2=patch_size,
        c=channels,
    )


@dataclass(frozen=True)
class MaskPlan:
    """Visible patch positions for the RGB and Event branches of one sample.

    ``shared`` is exactly the intersection of the two visible sets; the
    remaining visible positions of each modality are disjoint.
    """

    num_patches: int
    rgb_visible: np.ndarray
    event_visible: np.ndarray
    shared: np.ndarray

    @property
    def visible_count(self):
        return len(self.rgb_visible)

    @property
    def shared_count(self):
        return len(self.shared)

    @property
    def rgb_masked(self):
        return np.setdiff1d(np.arange(self.num_patches), self.rgb_visible)

    @property
    def event_masked(self):
        return np.setdiff1d(np.arange(self.num_patches), self.event_visible)

    def check(self):
        """Raise ``AssertionError`` if any structural invariant fails."""
        v = self.visible_count
        assert len(self.event_visible) == v
        assert len(np.unique(self.rgb_visible)) == v
        assert len(np.unique(self.event_visible)) == v
        assert np.all(np.diff(self.rgb_visible) > 0)
        assert np.all(np.diff(self.event_visible) > 0)
        assert np.array_equal(
            np.intersect1d(self.rgb_visible, self.event_visible), self.shared
        )
        rgb_only = np.setdiff1d(self.rgb_visible, self.shared)
        event_only = np.setdiff1d(self.event_visible, self.shared)
        assert len(np.intersect1d(rgb_only, event_only)) == 0
        lo = min(self.rgb_visible.min(), self.event_visible.min())
        hi = max(self.rgb_visible.max(), self.event_visible.max())
        assert 0 <= lo and hi < self.num_patches


def plan_counts(num_patches, mask_ratio):
    """Return ``(visible, shared)`` counts for a mask ratio.

    ``visible = round(N * (1 - ratio))`` (Python's round-half-even; no
    tie occurs for the ratios used in practice) and ``shared = ceil(visible
    / 2)``. When the two visible sets cannot fit with only that much
    overlap (``2v - s > N``, e.g. ratio 0.25), the overlap is raised to the
    minimum feasible ``2v - N``.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    visible = int(round(num_patches * (1.0 - mask_ratio)))
    if visible < 2 or visible > num_patches:
        raise ConfigError(
            f"mask_ratio {mask_ratio} leaves {visible} visible of {num_patches} patches"
        )
    shared = max(math.ceil(visible / 2), 2 * visible - num_patches)
    return visible, shared


def _draw(num_patches, visible, shared, rng):
    # A random permutation's prefixes are sequential uniform draws without
    # replacement: shared, then RGB-only, then Event-only from what remains.
    perm = rng.permutation(num_patches)
    extra = visible - shared
    shared_idx = perm[:shared]
    rgb_only = perm[shared : shared + extra]
    event_only = perm[shared + extra : shared + 2 * extra]
    return (
        np.sort(np.concatenate([shared_idx, rgb_only])),
        np.sort(np.concatenate([shared_idx, event_only])),
        np.sort(shared_idx),
    )


def sample_mask_plan(num_patches, mask_ratio, rng):
    """Sample one aligned :class:`MaskPlan`.

    Parameters
    ----------
    num_patches : int
    mask_ratio : float in (0, 1)
    rng : numpy.random.Generator
    """
    visible, shared = plan_counts(num_patches, mask_ratio)
    rgb, event, common = _draw(num_patches, visible, shared, rng)
    return MaskPlan(num_patches, rgb, event, common)


def sample_mask_plans(batch_size, num_patches, mask_ratio, rng):
    """Sample ``batch_size`` independent plans; one per sample in a batch."""
    return [sample_mask_plan(num_patches, mask_ratio, rng) for _ in range(batch_size)]
