"""Central finite-difference checks of autograd gradients in float64."""
import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    group: str
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self):
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale


def central_difference(loss_fn, tensor, index, eps, order=2):
    """Central difference of ``loss_fn`` w.r.t. one tensor entry.

    ``order=2`` is the two-point stencil; ``order=4`` the five-point
    stencil ``(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h``, whose smaller
    truncation error allows a larger ``h`` and so less roundoff.
    """
    def at(offset):
        tensor[index] = orig + offset
        return float(loss_fn())

    with torch.no_grad():
        orig = tensor[index].item()
        try:
            if order == 2:
                return (at(eps) - at(-eps)) / (2 * eps)
            if order == 4:
                return (at(-2 * eps) - 8 * at(-eps) + 8 * at(eps) - at(2 * eps)) / (12 * eps)
            raise ValueError(f"unsupported stencil order {order}")
        finally:
            tensor[index] = orig


def sample_entries(named_params, fraction, rng):
    """Pick ``ceil(fraction * total)`` entries uniformly across a parameter group."""
    sizes = [p.numel() for _, p in named_params]
    total = sum(sizes)
    k = max(1, math.ceil(fraction * total))
    flat = np.sort(rng.choice(total, size=min(k, total), replace=False))
    offsets = np.cumsum([0] + sizes)
    picks = []
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        name, p = named_params[i]
        picks.append((name, p, tuple(int(v) for v in np.unravel_index(f - offsets[i], p.shape))))
    return picks


def check_groups(loss_fn, groups, fraction=0.01, eps=1e-4, order=2, seed=0):
    """Compare autograd and central differences on a random sample of every group.

    Parameters
    ----------
    loss_fn : callable returning a scalar tensor; must be deterministic
    groups : dict group -> list of (name, parameter), parameters in float64

    Returns
    -------
    list of GradCheckResult
    """
    rng = np.random.default_rng(seed)
    params = [p for named in groups.values() for _, p in named]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = {id(p): (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for p in params}
    results = []
    for group, named in groups.items():
        for name, p, idx in sample_entries(named, fraction, rng):
            numeric = central_difference(loss_fn, p, idx, eps, order)
            results.append(GradCheckResult(group, name, idx, float(grads[id(p)][idx]), numeric))
    return results


def passes(result, rtol=1e-3, zero_tol=1e-10):
    """Relative agreement; gradients below ``zero_tol`` on both sides count as zero."""
    if max(abs(result.analytic), abs(result.numeric)) < zero_tol:
        return True
    return result.rel_error <= rtol


def model_gradcheck(model_config=None, fraction=0.01, batch_size=4, order=2, eps=1e-4, seed=0):
    """Gradient check of the total loss of a float64 model on a fixed synthetic batch.

    Every parameter group is sampled; the mask plans are drawn once so the
    loss is a deterministic function of the parameters.
    """
    from .config import toy_config
    from .data import SyntheticConfig, collate, generate_dataset
    from .masking import sample_mask_plans
    from .training import build_model

    cfg = model_config or toy_config()
    model = build_model(cfg, seed).double().eval()
    syn = SyntheticConfig(
        image_size=cfg.image_size,
        voxel_count=cfg.voxel_count,
        events_per_voxel=cfg.events_per_voxel,
    )
    rgb, event, voxels, _ = collate(generate_dataset(batch_size, seed, syn, workers=0), dtype=torch.float64)
    plans = sample_mask_plans(batch_size, cfg.num_patches, 0.75, np.random.default_rng(seed))

    def loss_fn():
        return model(rgb, event, voxels, plans).loss

    return check_groups(loss_fn, model.parameter_groups(), fraction, eps, order, seed)
