"""Training loop, optimizer schedules, checkpointing, model selection.

The loop is the single owner of mutable parameters. All randomness is
derived per epoch from (seed, epoch), so a run checkpointed at an epoch
boundary resumes to bit-identical losses.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, TrainingDivergedError
from .models import (
    KIND_ORDER,
    Network,
    NetworkConfig,
    NetworkKind,
    default_network_config,
    build_network,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import DiceReport, evaluate_model, total_loss
from .preprocess import AugmentationRanges, sample_batch
from .volume_io import MultiModalCase

PAPER_EPOCHS = 280


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass
class OptimizerSpec:
    kind: OptimizerKind
    initial_lr: float
    decay_rate: float
    decay_interval_epochs: int
    momentum: float = 0.9  # sgd only

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be > 0")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigError("decay_rate must lie in (0, 1]")
        if self.decay_interval_epochs < 1:
            raise ConfigError("decay_interval_epochs must be >= 1")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    patch_size: int
    optimizer: OptimizerSpec
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # None -> ceil(|train| / batch)
    augmentation: Optional[AugmentationRanges] = field(default_factory=AugmentationRanges)
    checkpoint_every: int = 1
    validate_every: int = 1
    eval_threshold: float = 0.5
    eval_overlap: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when given")


def default_config(kind: NetworkKind, scale: str = "paper") -> TrainConfig:
    """Published per-kind settings; desk scale shrinks sizes, not optimizers."""
    kind = NetworkKind(kind)
    if scale == "paper":
        epochs, patch = PAPER_EPOCHS, 128
    elif scale == "desk":
        epochs, patch = 30, 32
    else:
        raise ConfigError(f"unknown scale '{scale}'")
    interval = max(1, epochs // 5)
    if kind is NetworkKind.CASCADED_UNET3D:
        opt = OptimizerSpec(
            kind=OptimizerKind.SGD,
            initial_lr=0.1,
            decay_rate=0.85,
            decay_interval_epochs=interval,
            momentum=0.9,
        )
        batch = 4
    else:
        opt = OptimizerSpec(
            kind=OptimizerKind.ADAM,
            initial_lr=2e-4,
            decay_rate=0.60,
            decay_interval_epochs=interval,
        )
        batch = 2
    return TrainConfig(epochs=epochs, batch_size=batch, patch_size=patch, optimizer=opt)


def lr_at(spec: OptimizerSpec, epoch: int) -> float:
    """Stepwise geometric decay: lr * rate^(floor(epoch / interval))."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return spec.initial_lr * spec.decay_rate ** (epoch // spec.decay_interval_epochs)


def _make_optimizer(spec: OptimizerSpec, parameters) -> torch.optim.Optimizer:
    if spec.kind is OptimizerKind.ADAM:
        return torch.optim.Adam(parameters, lr=spec.initial_lr)
    return torch.optim.SGD(parameters, lr=spec.initial_lr, momentum=spec.momentum)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: dict[str, float]  # means over the epoch's steps
    val_report: Optional[DiceReport] = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "loss": dict(self.loss),
            "val_report": self.val_report.to_dict() if self.val_report else None,
        }


@dataclass(eq=False)
class TrainedModel:
    network: Network
    history: list[EpochRecord]
    final_checkpoint: Optional[Path] = None
    tag: str = "standalone"


class _CaseSampler:
    """Seeded per-epoch case ordering: every case appears once per pass,
    re-permuted when steps ask for more batches than one pass provides."""

    def __init__(self, n_cases: int, rng: np.random.Generator):
        self.n = n_cases
        self.rng = rng
        self.order: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(self.order.pop(0))
        return out


def train_model(
    kind: NetworkKind,
    train_cases: Sequence[MultiModalCase],
    val_cases: Sequence[MultiModalCase],
    config: TrainConfig,
    network_config: Optional[NetworkConfig] = None,
    out_dir: Optional[Path] = None,
    tag: str = "standalone",
    resume_from: Optional[Path] = None,
) -> TrainedModel:
    """Optimize total_loss on augmented patches; validate and checkpoint per epoch.

    Cases must be labeled and normalized. Deterministic given (config.seed,
    inputs) up to the compute backend's fixed reduction order.
    """
    kind = NetworkKind(kind)
    if not train_cases:
        raise ContractError("train_cases must be non-empty")
    unlabeled = [c.case_id for c in train_cases if c.label is None]
    if unlabeled:
        raise ContractError(f"train cases without labels: {unlabeled}")

    start_epoch = 0
    optimizer_state = None
    if resume_from is not None:
        network, extra = load_checkpoint(resume_from)
        if network.config.kind is not kind:
            raise ConfigError(f"checkpoint kind {network.config.kind} != requested {kind}")
        start_epoch = int(extra["epoch"])
        optimizer_state = extra.get("optimizer_state")
    else:
        if network_config is None:
            network_config = default_network_config(kind, scale="desk")
        network = build_network(network_config, seed=config.seed)

    module = network.module
    optimizer = _make_optimizer(config.optimizer, module.parameters())
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    n = len(train_cases)
    steps = config.steps_per_epoch or math.ceil(n / config.batch_size)
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / kind.value
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history: list[EpochRecord] = []
    final_ckpt = None
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(config.optimizer, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        # All of this epoch's randomness flows from (seed, epoch).
        epoch_seq = np.random.SeedSequence(entropy=(config.seed, epoch))
        epoch_rng = np.random.default_rng(epoch_seq)
        sampler = _CaseSampler(n, epoch_rng)

        module.train()
        sums = {"dice_similarity": 0.0, "dice_loss": 0.0, "bce": 0.0, "total": 0.0}
        for _ in range(steps):
            idx = sampler.take(min(config.batch_size, n))
            batch_cases = [train_cases[i] for i in idx]
            batch_seed = int(epoch_rng.integers(0, 2**63 - 1))
            batch = sample_batch(
                batch_cases, config.patch_size, batch_seed, ranges=config.augmentation
            )
            x = torch.as_tensor(batch.inputs)
            g = torch.as_tensor(batch.targets.astype(np.float32))
            optimizer.zero_grad()
            probs = module(x)
            breakdown = total_loss(probs, g)
            total = breakdown.total
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"{kind.value}: non-finite loss at epoch {epoch}, "
                    f"cases {batch.case_ids}",
                    batch_case_ids=batch.case_ids,
                )
            total.backward()
            optimizer.step()
            for key, value in breakdown.to_floats().items():
                sums[key] += value
        loss_means = {k: v / steps for k, v in sums.items()}

        val_report = None
        last_epoch = epoch == config.epochs - 1
        if val_cases and ((epoch + 1) % config.validate_every == 0 or last_epoch):
            val_report = evaluate_model(
                network,
                val_cases,
                threshold=config.eval_threshold,
                patch_size=config.patch_size,
                overlap=config.eval_overlap,
            )
        history.append(EpochRecord(epoch=epoch, lr=lr, loss=loss_means, val_report=val_report))

        if ckpt_dir is not None and ((epoch + 1) % config.checkpoint_every == 0 or last_epoch):
            extra = {
                "epoch": epoch + 1,
                "tag": tag,
                "optimizer_state": optimizer.state_dict(),
            }
            final_ckpt = save_checkpoint(network, ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt", extra)

    if ckpt_dir is not None:
        (ckpt_dir / "history.json").write_text(
            json.dumps({"tag": tag, "epochs": [r.to_dict() for r in history]}, indent=2)
        )
    return TrainedModel(network=network, history=history, final_checkpoint=final_ckpt, tag=tag)


def select_best(reports: dict[NetworkKind, DiceReport]) -> NetworkKind:
    """Winner takes the most regions with a strictly greater score; ties break
    by higher mean dice, then by the fixed kind order."""
    if len(reports) < 2:
        raise ContractError("select_best needs at least two reports")
    kinds = list(reports)
    wins = {k: 0 for k in kinds}
    region_names = next(iter(reports.values())).per_region.keys()
    for region in region_names:
        scores = {k: reports[k].per_region[region] for k in kinds}
        top = max(scores.values())
        leaders = [k for k, s in scores.items() if s == top]
        if len(leaders) == 1:
            wins[leaders[0]] += 1

    def order_index(kind: NetworkKind) -> int:
        return KIND_ORDER.index(kind) if kind in KIND_ORDER else len(KIND_ORDER)

    return min(kinds, key=lambda k: (-wins[k], -reports[k].mean, order_index(k)))
