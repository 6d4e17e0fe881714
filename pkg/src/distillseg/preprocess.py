"""Intensity normalization, region targets, patch extraction, augmentation.

All operations are pure functions of their inputs (plus an explicit seed),
so data-loading workers can call them concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, IntegrityError, NormalizationError, ParameterError
from .volume_io import (
    LABEL_EDEMA,
    LABEL_ENHANCING,
    LABEL_NECROTIC,
    MODALITY_ORDER,
    LabelMask,
    ModalityVolume,
    MultiModalCase,
)

REGION_NAMES = ("ET", "TC", "WT")


@dataclass(eq=False)
class RegionMask:
    """Binary region channels (ET, TC, WT), shape (3, D, H, W), nested voxelwise."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise IntegrityError(f"region mask must have shape (3, D, H, W), got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise IntegrityError("region mask values must be 0/1")
        arr = arr.astype(np.uint8)
        et, tc, wt = arr[0], arr[1], arr[2]
        if np.any(et > tc) or np.any(tc > wt):
            raise IntegrityError("region nesting violated: ET must lie in TC, TC in WT")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def voxel_counts(self) -> dict[str, int]:
        return {name: int(self.data[i].sum()) for i, name in enumerate(REGION_NAMES)}


def normalize_nonzero(volume: ModalityVolume) -> ModalityVolume:
    """Zero-mean, unit-variance over the nonzero foreground; zeros stay zero.

    Uses the population (biased) variance. Degenerate foregrounds (fewer than
    two voxels, or zero variance) are rejected.
    """
    data = volume.data
    mask = data != 0
    n_fg = int(mask.sum())
    if n_fg < 2:
        raise NormalizationError(
            f"{volume.modality.value}: need >= 2 nonzero voxels, found {n_fg}"
        )
    fg = data[mask].astype(np.float64)
    mean = fg.mean()
    var = fg.var()
    if var == 0.0:
        raise NormalizationError(f"{volume.modality.value}: constant nonzero foreground")
    out = np.zeros_like(data, dtype=np.float32)
    out[mask] = ((fg - mean) / np.sqrt(var)).astype(np.float32)
    return ModalityVolume(volume.modality, out)


def normalize_case(case: MultiModalCase) -> MultiModalCase:
    """Normalize every modality of a case; label and metadata pass through."""
    volumes = {mod: normalize_nonzero(vol) for mod, vol in case.modalities.items()}
    return MultiModalCase(
        case_id=case.case_id,
        modalities=volumes,
        label=case.label,
        source=case.source,
        meta=dict(case.meta),
    )


def labels_to_regions(mask: LabelMask) -> RegionMask:
    """ET = {4}, TC = {1, 4}, WT = {1, 2, 4}; nested by construction."""
    lab = mask.data
    et = lab == LABEL_ENHANCING
    tc = et | (lab == LABEL_NECROTIC)
    wt = tc | (lab == LABEL_EDEMA)
    return RegionMask(np.stack([et, tc, wt]).astype(np.uint8))


def regions_to_labels(regions: RegionMask) -> LabelMask:
    """Inverse of labels_to_regions on nested masks."""
    et, tc, wt = regions.data.astype(bool)
    lab = np.zeros(et.shape, dtype=np.uint8)
    lab[wt & ~tc] = LABEL_EDEMA
    lab[tc & ~et] = LABEL_NECROTIC
    lab[et] = LABEL_ENHANCING
    return LabelMask(lab)


def _pad_to(volume: np.ndarray, patch_size: int) -> np.ndarray:
    # Symmetric zero padding on the trailing three (spatial) axes.
    pads = [(0, 0)] * (volume.ndim - 3)
    for dim in volume.shape[-3:]:
        total = max(0, patch_size - dim)
        pads.append((total // 2, total - total // 2))
    if any(p != (0, 0) for p in pads):
        volume = np.pad(volume, pads, mode="constant", constant_values=0)
    return volume


def extract_patch(
    case: MultiModalCase,
    patch_size: int,
    seed: int,
    with_targets: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray], tuple[int, int, int]]:
    """Crop one random cubic patch; volumes smaller than the patch are zero-padded.

    Returns (inputs (4, P, P, P), targets (3, P, P, P) or None, origin).
    """
    inputs = _pad_to(case.stacked(), patch_size)
    targets = None
    if with_targets:
        if case.label is None:
            raise ContractError(f"case {case.case_id} has no label; cannot emit targets")
        targets = _pad_to(labels_to_regions(case.label).data, patch_size)

    rng = np.random.default_rng(seed)
    spatial = inputs.shape[1:]
    origin = tuple(int(rng.integers(0, dim - patch_size + 1)) for dim in spatial)
    sl = (slice(None),) + tuple(slice(o, o + patch_size) for o in origin)
    inputs = np.ascontiguousarray(inputs[sl], dtype=np.float32)
    if targets is not None:
        targets = np.ascontiguousarray(targets[sl])
    return inputs, targets, origin


@dataclass
class AugmentationRanges:
    """Draw ranges for one augmentation sample; override via the experiment config."""

    rotation_deg: float = 15.0
    scale: tuple[float, float] = (0.85, 1.15)
    mirror_prob: float = 0.5
    contrast: tuple[float, float] = (0.75, 1.25)
    intensity_shift: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ParameterError("rotation_deg must be >= 0")
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0]:
            raise ParameterError(f"invalid scale range {self.scale}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ParameterError("mirror_prob must lie in [0, 1]")


@dataclass
class AugmentationParams:
    """One concrete draw: fully determined by (ranges, seed)."""

    angles_deg: tuple[float, float, float]
    scale: float
    mirror: tuple[bool, bool, bool]
    contrast: tuple[float, float, float, float]
    intensity_shift: tuple[float, float, float, float]
    seed: int = 0

    @classmethod
    def draw(cls, ranges: AugmentationRanges, seed: int) -> "AugmentationParams":
        rng = np.random.default_rng(seed)
        angles = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg, size=3)
        scale = float(rng.uniform(*ranges.scale))
        mirror = rng.random(3) < ranges.mirror_prob
        contrast = rng.uniform(*ranges.contrast, size=4)
        shift = rng.uniform(*ranges.intensity_shift, size=4)
        return cls(
            angles_deg=tuple(float(a) for a in angles),
            scale=scale,
            mirror=tuple(bool(m) for m in mirror),
            contrast=tuple(float(c) for c in contrast),
            intensity_shift=tuple(float(s) for s in shift),
            seed=seed,
        )

    @classmethod
    def identity(cls) -> "AugmentationParams":
        return cls(
            angles_deg=(0.0, 0.0, 0.0),
            scale=1.0,
            mirror=(False, False, False),
            contrast=(1.0, 1.0, 1.0, 1.0),
            intensity_shift=(0.0, 0.0, 0.0, 0.0),
        )


def _rotation_matrix(angles_deg) -> np.ndarray:
    a, b, c = np.deg2rad(angles_deg)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_augmentation(
    inputs: np.ndarray,
    targets: Optional[np.ndarray],
    params: AugmentationParams,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Mask-consistent augmentation of one (inputs, targets) pair.

    Spatial transforms (mirror, rotation, isotropic scale, cropped back to
    the input size) hit inputs and targets identically: inputs are resampled
    trilinearly, targets nearest-neighbor so they stay binary and nested.
    Contrast and intensity shift touch the input channels only. Identity
    parameters are a bit-exact no-op.
    """
    if params.scale <= 0:
        raise ParameterError(f"scale factor must be > 0, got {params.scale}")
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.ndim != 4:
        raise ContractError(f"inputs must be (C, D, H, W), got shape {inputs.shape}")
    if targets is not None:
        targets = np.asarray(targets)
        if targets.shape[1:] != inputs.shape[1:]:
            raise ContractError(
                f"targets spatial shape {targets.shape[1:]} != inputs {inputs.shape[1:]}"
            )

    for axis, flip in enumerate(params.mirror):
        if flip:
            inputs = np.flip(inputs, axis=axis + 1)
            if targets is not None:
                targets = np.flip(targets, axis=axis + 1)
    inputs = np.ascontiguousarray(inputs)
    if targets is not None:
        targets = np.ascontiguousarray(targets)

    needs_resample = any(a != 0.0 for a in params.angles_deg) or params.scale != 1.0
    if needs_resample:
        rot = _rotation_matrix(params.angles_deg)
        matrix = rot.T / params.scale
        center = (np.array(inputs.shape[1:]) - 1) / 2.0
        offset = center - matrix @ center
        resampled = np.empty_like(inputs)
        for c in range(inputs.shape[0]):
            resampled[c] = ndimage.affine_transform(
                inputs[c], matrix, offset=offset, order=1, mode="constant", cval=0.0
            )
        inputs = resampled
        if targets is not None:
            out_t = np.empty_like(targets)
            for c in range(targets.shape[0]):
                out_t[c] = ndimage.affine_transform(
                    targets[c], matrix, offset=offset, order=0, mode="constant", cval=0
                )
            targets = out_t

    contrast = np.asarray(params.contrast, dtype=np.float32)
    shift = np.asarray(params.intensity_shift, dtype=np.float32)
    if np.any(contrast != 1.0) or np.any(shift != 0.0):
        inputs = inputs * contrast[:, None, None, None] + shift[:, None, None, None]

    return inputs, targets


@dataclass(eq=False)
class PatchBatch:
    """One training batch of augmented patches."""

    inputs: np.ndarray  # (B, 4, P, P, P) float32
    targets: np.ndarray  # (B, 3, P, P, P) uint8
    case_ids: list[str]
    patch_origins: list[tuple[int, int, int]]

    def __post_init__(self):
        if self.inputs.ndim != 5 or self.targets.ndim != 5:
            raise IntegrityError("batch arrays must be 5D")
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[0] < 1:
            raise IntegrityError("batch sizes disagree or are empty")
        if len(self.case_ids) != self.inputs.shape[0]:
            raise IntegrityError("case_ids length != batch size")


def sample_batch(
    cases: list[MultiModalCase],
    patch_size: int,
    seed: int,
    ranges: Optional[AugmentationRanges] = None,
) -> PatchBatch:
    """Extract one patch per case (in order), optionally augmented, stacked."""
    if not cases:
        raise ContractError("sample_batch needs at least one case")
    child_seeds = np.random.SeedSequence(seed).generate_state(2 * len(cases))
    inputs, targets, ids, origins = [], [], [], []
    for i, case in enumerate(cases):
        x, t, origin = extract_patch(case, patch_size, int(child_seeds[2 * i]))
        if ranges is not None:
            params = AugmentationParams.draw(ranges, int(child_seeds[2 * i + 1]))
            x, t = apply_augmentation(x, t, params)
        inputs.append(x)
        targets.append(t)
        ids.append(case.case_id)
        origins.append(origin)
    return PatchBatch(
        inputs=np.stack(inputs).astype(np.float32),
        targets=np.stack(targets).astype(np.uint8),
        case_ids=ids,
        patch_origins=origins,
    )
