"""Mask loss, freeze policy and the optimisation loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, DivergenceError, FreezePolicyError, InvalidInputError, ShapeError
from .segcore.checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .segcore.model import PromptableSegmenter, pad_prompts, threshold, to_image_tensor
from .validation import check_mask

logger = logging.getLogger(__name__)

FULL_SCALE_BATCH_SIZE = 160
FULL_SCALE_ITERATIONS = 12000


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lambda_bce: float = 1.0
    lambda_dice: float = 0.5
    batch_size: int = 8
    total_iterations: int = 1000
    seed: int = 0
    dice_smooth: float = 1.0
    checkpoint_every: int = 0
    train_projection: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.total_iterations < 0:
            raise ConfigurationError("batch_size must be positive and total_iterations non-negative")
        for name in ("learning_rate", "weight_decay", "lambda_bce", "lambda_dice", "dice_smooth"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and non-negative, got {v}")
        if self.dice_smooth <= 0:
            raise ConfigurationError("dice_smooth must be positive")


def _as_tensor(x, dtype=None) -> Tensor:
    t = x if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x))
    return t.to(dtype) if dtype is not None else t


def _pair(logits, target) -> tuple[Tensor, Tensor]:
    logits = _as_tensor(logits)
    if not logits.is_floating_point():
        logits = logits.to(torch.float64)
    target = _as_tensor(target, logits.dtype)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    return logits, target


def bce_loss(logits, target) -> Tensor:
    """Mean per-pixel binary cross-entropy on logits."""
    logits, target = _pair(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def dice_loss(logits, target, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p*t) + s) / (sum(p) + sum(t) + s)`` with ``p = sigmoid``.

    Sums run over the last two axes; leading (batch) axes are averaged.
    """
    logits, target = _pair(logits, target)
    p = torch.sigmoid(logits)
    inter = (p * target).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


@dataclass
class LossRecord:
    total: Tensor
    bce: Tensor
    dice: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"total": float(self.total), "bce": float(self.bce), "dice": float(self.dice)}


def compute_loss(logits, target, config: TrainConfig = TrainConfig()) -> LossRecord:
    bce = bce_loss(logits, target)
    dice = dice_loss(logits, target, config.dice_smooth)
    return LossRecord(config.lambda_bce * bce + config.lambda_dice * dice, bce, dice)


TRAINABLE_GROUPS = ("adapters", "decoder", "projection")
FROZEN_GROUPS = ("encoder",)


def freeze_policy(model: PromptableSegmenter, train_projection: bool = True) -> list[str]:
    """Freeze the image encoder, train adapters, decoder (and projection).

    Sets ``requires_grad`` accordingly and returns the trainable names.
    """
    groups = set(TRAINABLE_GROUPS) - (set() if train_projection else {"projection"})
    trainable = []
    for name, p in model.named_parameters():
        on = name.split(".", 1)[0] in groups
        p.requires_grad_(on)
        if on:
            trainable.append(name)
    check_freeze_policy(model, trainable)
    return trainable


def check_freeze_policy(model: PromptableSegmenter, trainable: Sequence[str]) -> None:
    bad = [n for n in trainable if n.split(".", 1)[0] in FROZEN_GROUPS]
    if bad:
        raise FreezePolicyError(f"frozen parameters marked trainable: {bad[:5]}")
    own = {n for n, _ in model.named_parameters()}
    unknown = set(trainable) - own
    if unknown:
        raise FreezePolicyError(f"unknown parameters {sorted(unknown)[:5]}")


def make_optimizer(model: PromptableSegmenter, trainable: Sequence[str], config: TrainConfig) -> torch.optim.Optimizer:
    params = dict(model.named_parameters())
    return torch.optim.AdamW(
        [params[n] for n in trainable], lr=config.learning_rate, weight_decay=config.weight_decay, betas=(0.9, 0.999), eps=1e-8
    )


@dataclass
class Batch:
    images: Tensor
    prompts: Tensor
    prompt_mask: Tensor
    masks: Tensor
    ids: list[str]


class InMemoryData:
    """Images, raw prompt embeddings and masks held as tensors."""

    def __init__(self, images, prompts: Sequence[np.ndarray], masks, ids: Sequence[str] | None = None, dtype=torch.float32):
        if not (len(images) == len(prompts) == len(masks)):
            raise InvalidInputError("images, prompts and masks differ in length")
        if len(images) == 0:
            raise InvalidInputError("empty dataset")
        self.images = images if isinstance(images, Tensor) else to_image_tensor(images, dtype)
        self.prompts = [np.asarray(p, dtype=np.float32) for p in prompts]
        h, w = self.images.shape[2:]
        self.masks = torch.from_numpy(np.stack([check_mask(m, (h, w)) for m in masks])).to(dtype)
        self.ids = [str(i) for i in ids] if ids is not None else [str(i) for i in range(len(images))]
        self.dtype = dtype

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, indices: Sequence[int]) -> Batch:
        idx = list(indices)
        prompts, mask = pad_prompts([self.prompts[i] for i in idx], dtype=self.dtype)
        return Batch(self.images[idx], prompts, mask, self.masks[idx], [self.ids[i] for i in idx])


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Sample ids for one iteration, a pure function of (seed, iteration) so
    resumed runs replay the same stream."""
    rng = np.random.default_rng([seed, iteration])
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def train_step(model: PromptableSegmenter, batch: Batch, optimizer: torch.optim.Optimizer, config: TrainConfig) -> LossRecord:
    """One AdamW step on the trainable parameters."""
    if len(batch.ids) == 0:
        raise InvalidInputError("empty batch")
    model.train()
    with torch.no_grad():
        pyramid = model.encode_image(batch.images)
    logits = model(batch.images, batch.prompts, batch.prompt_mask, pyramid=pyramid)
    record = compute_loss(logits, batch.masks, config)
    if not torch.isfinite(record.total):
        raise DivergenceError(f"non-finite loss {record.total.item()}", batch.ids)
    optimizer.zero_grad(set_to_none=True)
    record.total.backward()
    optimizer.step()
    return LossRecord(record.total.detach(), record.bce.detach(), record.dice.detach())


@dataclass
class FitResult:
    losses: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    iteration: int = 0


def fit(
    config: TrainConfig,
    data: InMemoryData,
    model: PromptableSegmenter,
    *,
    out_dir=None,
    resume_from=None,
    stop_at: int | None = None,
) -> FitResult:
    """Train for ``config.total_iterations`` steps.

    With ``out_dir`` a checkpoint is written every ``checkpoint_every`` steps
    (and at the end) together with ``loss_log.jsonl``. ``resume_from`` picks up
    a checkpoint's parameters, optimizer moments and iteration counter.
    ``stop_at`` ends the run early, as an interruption would.
    """
    torch.manual_seed(config.seed)
    trainable = freeze_policy(model, config.train_projection)
    optimizer = make_optimizer(model, trainable, config)
    start = 0
    if resume_from is not None:
        _, manifest, optim_state = load_checkpoint(resume_from, model)
        restore_optimizer(optimizer, model, optim_state)
        start = int(manifest["iteration"])
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "loss_log.jsonl").open("a" if resume_from is not None else "w")
    result = FitResult(iteration=start)
    end = config.total_iterations if stop_at is None else min(stop_at, config.total_iterations)
    t0 = time.perf_counter()
    try:
        if out is not None and start == 0:
            result.checkpoints.append(_checkpoint(out, model, trainable, optimizer, 0, config))
        for it in range(start, end):
            idx = batch_indices(len(data), config.batch_size, config.seed, it)
            rec = train_step(model, data.batch(idx), optimizer, config)
            row = {"iteration": it + 1, **rec.as_floats(), "lr": config.learning_rate, "wall_clock": time.perf_counter() - t0}
            result.losses.append(row)
            result.iteration = it + 1
            if log_fh is not None:
                log_fh.write(json.dumps(row) + "\n")
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                result.checkpoints.append(_checkpoint(out, model, trainable, optimizer, it + 1, config))
        if out is not None and (not result.checkpoints or _iter_of(result.checkpoints[-1]) != result.iteration):
            result.checkpoints.append(_checkpoint(out, model, trainable, optimizer, result.iteration, config))
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def _iter_of(path: Path) -> int:
    return int(path.stem.split("_")[-1])


def _checkpoint(out: Path, model, trainable, optimizer, iteration: int, config: TrainConfig) -> Path:
    path = out / f"ckpt_{iteration:06d}.npz"
    save_checkpoint(path, model, trainable, optimizer=optimizer, iteration=iteration, extra={"train_config": asdict(config)})
    (out / "latest.txt").write_text(path.name + "\n")
    return path


def read_loss_log(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


@torch.no_grad()
def predict_logits(model: PromptableSegmenter, data: InMemoryData, batch_size: int = 16) -> Tensor:
    model.eval()
    outs = []
    for s in range(0, len(data), batch_size):
        b = data.batch(range(s, min(s + batch_size, len(data))))
        outs.append(model(b.images, b.prompts, b.prompt_mask))
    return torch.cat(outs)


def predict_masks(model: PromptableSegmenter, data: InMemoryData, batch_size: int = 16) -> np.ndarray:
    return threshold(predict_logits(model, data, batch_size))
