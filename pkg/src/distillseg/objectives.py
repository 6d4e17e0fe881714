"""Soft dice / BCE losses, the evaluation dice metric, and dice reports.

Losses operate on torch tensors (any float dtype; computations stay in the
input dtype so 64-bit checks are exact). The evaluation metric operates on
binarized numpy masks. Conventions pinned here once:

* dice smoothing epsilon 1e-5 in numerator and denominator,
* BCE probability clamp 1e-7,
* both-empty dice = 1.0,
* binarization threshold for evaluation: strictly greater than.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ContractError
from .preprocess import REGION_NAMES, labels_to_regions
from .volume_io import MultiModalCase

DICE_EPS = 1e-5
BCE_CLAMP = 1e-7


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ContractError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.ndim < 3:
        raise ContractError("expected (B, K, spatial...) tensors")


def soft_dice_similarity(
    pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS
) -> torch.Tensor:
    """Mean over regions of (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps).

    Sums run over every voxel of the batch for each region channel.
    Higher is better; 1.0 is a perfect (binary) prediction.
    """
    _check_pair(pred, target)
    target = target.to(pred.dtype)
    dims = tuple(d for d in range(pred.ndim) if d != 1)
    inter = (pred * target).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (target * target).sum(dim=dims)
    return ((2.0 * inter + eps) / (denom + eps)).mean()


def bce_loss(pred: torch.Tensor, target: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    """Mean negative log-likelihood over all output values, with pred clamped
    into [clamp, 1 - clamp] so exact 0/1 predictions stay finite."""
    _check_pair(pred, target)
    target = target.to(pred.dtype)
    p = pred.clamp(min=clamp, max=1.0 - clamp)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


@dataclass
class LossBreakdown:
    """Scalar loss terms; tensors so the total can drive backprop."""

    dice_similarity: torch.Tensor
    dice_loss: torch.Tensor
    bce: torch.Tensor
    total: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "dice_similarity": float(self.dice_similarity.detach()),
            "dice_loss": float(self.dice_loss.detach()),
            "bce": float(self.bce.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(pred: torch.Tensor, target: torch.Tensor) -> LossBreakdown:
    """Unweighted sum of (1 - soft dice similarity) and BCE."""
    dice_sim = soft_dice_similarity(pred, target)
    dice_l = 1.0 - dice_sim
    bce = bce_loss(pred, target)
    return LossBreakdown(dice_similarity=dice_sim, dice_loss=dice_l, bce=bce, total=dice_l + bce)


def dice_metric(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """2|P∩G| / (|P| + |G|) on binary masks; 1.0 when both are empty."""
    pred_mask = np.asarray(pred_mask)
    target_mask = np.asarray(target_mask)
    if pred_mask.shape != target_mask.shape:
        raise ContractError(
            f"mask shapes differ: {pred_mask.shape} vs {target_mask.shape}"
        )
    if not np.isin(pred_mask, (0, 1)).all() or not np.isin(target_mask, (0, 1)).all():
        raise ContractError("dice_metric expects binary masks")
    p = pred_mask.astype(bool)
    g = target_mask.astype(bool)
    p_sum = int(p.sum())
    g_sum = int(g.sum())
    if p_sum + g_sum == 0:
        return 1.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (p_sum + g_sum)


@dataclass
class DiceReport:
    """Per-region dice for one model over one case set."""

    per_region: dict[str, float]
    mean: float
    n_cases: int

    def __post_init__(self):
        if set(self.per_region) != set(REGION_NAMES):
            raise ContractError(f"report must cover regions {REGION_NAMES}")

    @classmethod
    def from_case_scores(cls, case_scores: Sequence[dict[str, float]]) -> "DiceReport":
        if not case_scores:
            raise ContractError("cannot build a report from zero cases")
        per_region = {
            name: float(np.mean([s[name] for s in case_scores])) for name in REGION_NAMES
        }
        mean = float(np.mean([per_region[name] for name in REGION_NAMES]))
        return cls(per_region=per_region, mean=mean, n_cases=len(case_scores))

    def to_dict(self) -> dict:
        return {"per_region": dict(self.per_region), "mean": self.mean, "n_cases": self.n_cases}

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        return cls(per_region=dict(d["per_region"]), mean=float(d["mean"]), n_cases=int(d["n_cases"]))


def score_case(probs: np.ndarray, case: MultiModalCase, threshold: float) -> dict[str, float]:
    """Per-region dice of thresholded probabilities against a labeled case."""
    if case.label is None:
        raise ContractError(f"case {case.case_id} has no ground-truth label")
    target = labels_to_regions(case.label).data
    pred = (probs > threshold).astype(np.uint8)
    return {
        name: dice_metric(pred[i], target[i]) for i, name in enumerate(REGION_NAMES)
    }


def evaluate_model(
    network,
    cases: Sequence[MultiModalCase],
    threshold: float = 0.5,
    patch_size: Optional[int] = None,
    overlap: float = 0.0,
) -> DiceReport:
    """Full-volume inference on every case, binarize, report per-region means.

    Cases must be labeled and already normalized.
    """
    from .models import predict_case  # local import to avoid a cycle

    if not cases:
        raise ContractError("evaluate_model needs at least one case")
    scores = []
    for case in cases:
        size = patch_size if patch_size is not None else min(case.shape)
        probs = predict_case(network, case, patch_size=size, overlap=overlap)
        scores.append(score_case(probs, case, threshold))
    return DiceReport.from_case_scores(scores)
