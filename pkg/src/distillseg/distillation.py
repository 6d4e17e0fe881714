"""Ensemble fusion, pseudo-labeling of the unlabeled pool, student training.

Pool cases arrive as unlabeled views (label stripped); the withheld ground
truth never enters this module except through `audit_pseudo_labels`, which
exists precisely to measure pseudo-label quality after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, ParameterError
from .models import Network, NetworkKind, NetworkConfig, predict_case
from .objectives import DiceReport, dice_metric, score_case
from .preprocess import REGION_NAMES, RegionMask, labels_to_regions, regions_to_labels
from .training import TrainConfig, TrainedModel, train_model
from .volume_io import CaseSource, LabelMask, MultiModalCase


class FusionRule(str, Enum):
    AVERAGE = "average"
    MAJORITY = "majority"


@dataclass(eq=False)
class EnsembleSpec:
    members: list[Network]
    fusion: FusionRule = FusionRule.AVERAGE

    def __post_init__(self):
        self.fusion = FusionRule(self.fusion)
        if len(self.members) < 2:
            raise ParameterError("an ensemble needs at least two members")


def ensemble_predict(
    spec: EnsembleSpec,
    case: MultiModalCase,
    patch_size: int,
    overlap: float = 0.0,
    member_threshold: float = 0.5,
) -> np.ndarray:
    """Fuse member probability maps for one normalized case.

    Average fusion takes the voxelwise arithmetic mean. Majority fusion
    binarizes each member first and marks voxels where strictly more than
    half the members agree, returned as {0, 1} probabilities.
    """
    maps = [predict_case(m, case, patch_size=patch_size, overlap=overlap) for m in spec.members]
    stack = np.stack(maps)
    if spec.fusion is FusionRule.AVERAGE:
        return stack.mean(axis=0)
    votes = (stack > member_threshold).sum(axis=0)
    return (2 * votes > len(spec.members)).astype(np.float32)


@dataclass(eq=False)
class PseudoLabeledCase:
    """A pool case annotated by the ensemble."""

    case: MultiModalCase
    region_target: RegionMask
    mean_confidence: float
    repaired_voxels: int


def _repair_nesting(binary: np.ndarray) -> tuple[np.ndarray, int]:
    # Top-down intersection: WT fixed, TC := TC & WT, ET := ET & TC.
    et, tc, wt = binary.astype(bool)
    tc_fixed = tc & wt
    et_fixed = et & tc_fixed
    repaired = int((tc_fixed != tc).sum() + (et_fixed != et).sum())
    return np.stack([et_fixed, tc_fixed, wt]).astype(np.uint8), repaired


def pseudo_label(
    spec: EnsembleSpec,
    pool: Sequence[MultiModalCase],
    threshold: float = 0.5,
    patch_size: Optional[int] = None,
    overlap: float = 0.0,
) -> list[PseudoLabeledCase]:
    """Annotate unlabeled cases with binarized, nesting-repaired ensemble output."""
    if not pool:
        raise ContractError("pseudo_label needs a non-empty pool")
    visible = [c.case_id for c in pool if c.label is not None]
    if visible:
        raise ContractError(f"pool cases must be unlabeled views, got labels on {visible}")

    out = []
    for case in pool:
        size = patch_size if patch_size is not None else min(case.shape)
        probs = ensemble_predict(spec, case, patch_size=size, overlap=overlap)
        binary = (probs > threshold).astype(np.uint8)
        repaired, n_repaired = _repair_nesting(binary)
        confidence = float(np.maximum(probs, 1.0 - probs).mean())
        regions = RegionMask(repaired)
        labeled = replace(
            case,
            label=regions_to_labels(regions),
            source=CaseSource.PSEUDO_LABELED,
        )
        out.append(
            PseudoLabeledCase(
                case=labeled,
                region_target=regions,
                mean_confidence=confidence,
                repaired_voxels=n_repaired,
            )
        )
    return out


def build_distill_set(
    original_train: Sequence[MultiModalCase],
    pseudo: Sequence[PseudoLabeledCase],
) -> list[MultiModalCase]:
    """Union of real and pseudo-labeled cases, ordered deterministically by id."""
    combined = list(original_train) + [p.case for p in pseudo]
    ids = [c.case_id for c in combined]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ContractError(f"case id collision between train set and pseudo set: {dupes}")
    return sorted(combined, key=lambda c: c.case_id)


def distill(
    best_kind: NetworkKind,
    distill_set: Sequence[MultiModalCase],
    val_cases: Sequence[MultiModalCase],
    config: TrainConfig,
    network_config: Optional[NetworkConfig] = None,
    out_dir: Optional[Path] = None,
) -> TrainedModel:
    """Train a fresh student of the winning kind on real + pseudo-labeled data."""
    return train_model(
        best_kind,
        distill_set,
        val_cases,
        config,
        network_config=network_config,
        out_dir=out_dir,
        tag="student",
    )


def audit_pseudo_labels(
    pseudo: Sequence[PseudoLabeledCase],
    withheld_truth: Mapping[str, LabelMask],
) -> DiceReport:
    """Post-hoc dice of pseudo-labels against the pool's withheld ground truth."""
    if not pseudo:
        raise ContractError("nothing to audit")
    scores = []
    for item in pseudo:
        truth = withheld_truth[item.case.case_id]
        target = labels_to_regions(truth).data
        pred = item.region_target.data
        scores.append(
            {name: dice_metric(pred[i], target[i]) for i, name in enumerate(REGION_NAMES)}
        )
    return DiceReport.from_case_scores(scores)


def evaluate_ensemble(
    spec: EnsembleSpec,
    cases: Sequence[MultiModalCase],
    threshold: float = 0.5,
    patch_size: Optional[int] = None,
    overlap: float = 0.0,
) -> DiceReport:
    """Score the fused ensemble like a single model."""
    if not cases:
        raise ContractError("evaluate_ensemble needs at least one case")
    scores = []
    for case in cases:
        size = patch_size if patch_size is not None else min(case.shape)
        probs = ensemble_predict(spec, case, patch_size=size, overlap=overlap)
        scores.append(score_case(probs, case, threshold))
    return DiceReport.from_case_scores(scores)
