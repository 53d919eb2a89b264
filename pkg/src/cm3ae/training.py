"""Pre-training loop: batching, mask sampling, AdamW with warmup + cosine decay,
per-step metrics log and resumable checkpoints."""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import preset
from .data import SyntheticConfig, collate, generate_dataset, load_dataset
from .exceptions import ConfigError, NonFiniteLossError
from .masking import plan_counts, sample_mask_plans
from .model import CM3AE

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.cmck"
METRICS_NAME = "metrics.jsonl"


@dataclass
class TrainConfig:
    """Everything that determines a pre-training run.

    ``steps`` overrides ``epochs * ceil(num_samples / batch_size)`` when set.
    """

    preset: str = "toy"
    mask_ratio: float = 0.75
    lr: float = 2e-4
    weight_decay: float = 0.04
    betas: tuple = (0.9, 0.95)
    warmup_fraction: float = 0.05
    batch_size: int = 8
    epochs: int = 1
    steps: int = None
    seed: int = 0
    enable_mfrm: bool = True
    enable_mcl: bool = True
    grad_clip: float = None
    num_samples: int = 8
    data_seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    data_dir: str = None
    out_dir: str = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be positive and weight decay non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.enable_mcl and self.batch_size < 2:
            raise ConfigError("contrastive learning needs batch_size >= 2")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        plan_counts(16, self.mask_ratio)  # range check only

    def total_steps(self, num_samples):
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(num_samples / self.batch_size)

    def to_dict(self):
        return dataclasses.asdict(self)


def lr_at(step, total, base_lr, warmup_fraction):
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    warmup = int(round(total * warmup_fraction))
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def build_model(model_config, seed):
    """Instantiate ``CM3AE`` with a seeded init, leaving the global RNG untouched."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return CM3AE(model_config)


def make_optimizer(model, config):
    params = [
        (n, p) for n, p in model.named_parameters()
        if model.is_active(n, config.enable_mfrm, config.enable_mcl)
    ]
    decay = [p for n, p in params if p.ndim >= 2]
    no_decay = [p for n, p in params if p.ndim < 2]
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.lr,
        betas=tuple(config.betas),
    )


def load_training_data(config, model_config):
    if config.data_dir:
        use_vox = config.enable_mfrm or config.enable_mcl
        return load_dataset(
            config.data_dir,
            image_size=model_config.image_size,
            record_width=model_config.voxel_record_width,
            use_voxels=use_vox,
        )
    syn = dataclasses.replace(
        config.synthetic,
        image_size=model_config.image_size,
        voxel_count=model_config.voxel_count,
        events_per_voxel=model_config.events_per_voxel,
    )
    return generate_dataset(config.num_samples, config.data_seed, syn)


class Trainer:
    """Owns the model, optimizer and generator of one pre-training run.

    Parameters
    ----------
    config : TrainConfig
    dataset : list of SamplePair, optional
        Defaults to the source described by ``config``.
    model_config : ModelConfig, optional
        Defaults to ``preset(config.preset)``.
    """

    def __init__(self, config, dataset=None, model_config=None):
        self.config = config
        self.model_config = model_config or preset(config.preset)
        self.dataset = dataset if dataset is not None else load_training_data(config, self.model_config)
        self.model = build_model(self.model_config, config.seed)
        self.optimizer = make_optimizer(self.model, config)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.total = config.total_steps(len(self.dataset))
        self.history = []
        self.out_dir = Path(config.out_dir) if config.out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- persistence ------------------------------------------------------------

    def save(self, path=None):
        path = Path(path) if path else self.out_dir / CHECKPOINT_NAME
        save_checkpoint(
            path, self.model, self.optimizer, self.step, self.rng,
            extra={"train_config": _jsonable(self.config.to_dict())},
        )
        return path

    def resume(self, path=None):
        """Restore parameters, AdamW moments, step counter and generator state."""
        path = Path(path) if path else self.out_dir / CHECKPOINT_NAME
        info = load_checkpoint(path, self.model, self.optimizer, self.rng)
        if info.get("config_digest") not in (None, self.model_config.digest()):
            raise ConfigError("checkpoint was written for a different model configuration")
        self.step = info["step"]
        return info

    # -- training -----------------------------------------------------------------

    def next_batch(self):
        n = len(self.dataset)
        b = min(self.config.batch_size, n)
        idx = self.rng.choice(n, size=b, replace=False)
        rgb, event, voxels, _ = collate([self.dataset[i] for i in idx])
        plans = sample_mask_plans(b, self.model_config.num_patches, self.config.mask_ratio, self.rng)
        return rgb, event, voxels, plans

    def train_step(self):
        cfg = self.config
        lr = lr_at(self.step, self.total, cfg.lr, cfg.warmup_fraction)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        rgb, event, voxels, plans = self.next_batch()
        self.model.train()
        out = self.model(rgb, event, voxels, plans, cfg.enable_mfrm, cfg.enable_mcl)
        for term, value in (("L_m", out.l_m), ("L_f", out.l_f), ("L_cl", out.l_cl), ("L", out.loss)):
            if not torch.isfinite(value):
                raise NonFiniteLossError(term, value.item())
        self.optimizer.zero_grad(set_to_none=True)
        out.loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        record = {"step": self.step, **out.metrics(), "lr": lr}
        self.step += 1
        return record

    def train(self, until=None):
        """Run until step ``until`` (default: the configured total); returns new records."""
        until = self.total if until is None else min(until, self.total)
        every = self.config.checkpoint_every
        log = open(self.out_dir / METRICS_NAME, "a") if self.out_dir else None
        records = []
        try:
            while self.step < until:
                rec = self.train_step()
                records.append(rec)
                if log:
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                    log.flush()
                if self.out_dir and every and self.step % every == 0:
                    self.save()
                if self.step % 50 == 0:
                    logger.info("step %d  L=%.4f  L_m=%.4f", rec["step"], rec["L"], rec["L_m"])
        finally:
            if log:
                log.close()
        if self.out_dir:
            self.save()
        self.history.extend(records)
        return records


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def pretrain(config, dataset=None, model_config=None, resume=False):
    """Train per ``config``; resume from ``out_dir`` when asked and a checkpoint exists."""
    trainer = Trainer(config, dataset, model_config)
    if resume and trainer.out_dir and (trainer.out_dir / CHECKPOINT_NAME).exists():
        trainer.resume()
        logger.info("resumed at step %d", trainer.step)
    trainer.train()
    return trainer
