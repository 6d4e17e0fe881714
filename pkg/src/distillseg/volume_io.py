"""Case I/O, synthetic phantom generation, and dataset splitting.

A case is a directory of gzipped NIfTI volumes, one per MRI modality,
named ``<case_id>_<tag>.nii.gz`` with tags t1 / t1ce / t2 / flair and an
optional ``_seg`` label volume. Phantom cases provide a desk-scale stand-in
for real data: a brain ellipsoid containing three concentric tumor
ellipsoids whose geometry is recorded in the case metadata, so tests can
re-derive every mask analytically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nifti
from .errors import ConfigError, ContractError, IntegrityError, LoadError, ParameterError


class Modality(str, Enum):
    """MRI acquisition type; the value is the filename suffix."""

    T1 = "t1"
    T1GD = "t1ce"
    T2 = "t2"
    FLAIR = "flair"


# Fixed channel order for stacked network inputs.
MODALITY_ORDER = (Modality.T1, Modality.T1GD, Modality.T2, Modality.FLAIR)

VALID_LABELS = frozenset({0, 1, 2, 4})
LABEL_ENHANCING = 4
LABEL_NECROTIC = 1
LABEL_EDEMA = 2


class CaseSource(str, Enum):
    REAL = "real"
    PHANTOM = "phantom"
    PSEUDO_LABELED = "pseudo_labeled"


@dataclass(eq=False)
class ModalityVolume:
    """One modality's intensity volume, shape (D, H, W)."""

    modality: Modality
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise IntegrityError(f"modality volume must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.data.shape):
            raise IntegrityError(f"non-positive volume shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise IntegrityError(f"{self.modality.value}: volume contains NaN/Inf")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(eq=False)
class LabelMask:
    """Raw voxel labels: 0 bg, 1 necrotic/non-enhancing core, 2 edema, 4 enhancing."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise IntegrityError(f"label mask must be 3D, got shape {arr.shape}")
        if arr.dtype.kind == "f":
            if not np.all(arr == np.round(arr)):
                raise IntegrityError("label mask contains non-integer values")
            arr = np.round(arr)
        values = set(np.unique(arr).tolist())
        bad = values - VALID_LABELS
        if bad:
            raise IntegrityError(f"label values outside {{0,1,2,4}}: {sorted(bad)}")
        self.data = arr.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(eq=False)
class MultiModalCase:
    """One subject: four aligned modality volumes, optional labels, provenance."""

    case_id: str
    modalities: Mapping[Modality, ModalityVolume]
    label: Optional[LabelMask] = None
    source: CaseSource = CaseSource.REAL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        tags = set(self.modalities)
        if tags != set(MODALITY_ORDER):
            missing = [m.value for m in MODALITY_ORDER if m not in tags]
            raise IntegrityError(f"case {self.case_id}: missing modalities {missing}")
        shapes = {vol.shape for vol in self.modalities.values()}
        if len(shapes) != 1:
            raise IntegrityError(f"case {self.case_id}: modality shapes differ: {shapes}")
        if self.label is not None and self.label.shape != next(iter(shapes)):
            raise IntegrityError(
                f"case {self.case_id}: label shape {self.label.shape} != volume shape"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.modalities[Modality.T1].shape

    def stacked(self) -> np.ndarray:
        """Modalities stacked to (4, D, H, W) in fixed order (T1, T1Gd, T2, FLAIR)."""
        return np.stack([self.modalities[m].data for m in MODALITY_ORDER], axis=0)

    def unlabeled_view(self) -> "MultiModalCase":
        """Same volumes with the label withheld; training-time consumers get this."""
        return replace(self, label=None)


@dataclass
class DatasetSplit:
    """Case-id partition; the unlabeled pool is carved out of validation and test."""

    train: list[str]
    validation: list[str]
    test: list[str]
    unlabeled_pool: list[str]
    seed: int

    def __post_init__(self):
        lists = [self.train, self.validation, self.test, self.unlabeled_pool]
        all_ids = [cid for part in lists for cid in part]
        if len(set(all_ids)) != len(all_ids):
            raise IntegrityError("split partitions are not pairwise disjoint")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "unlabeled_pool": list(self.unlabeled_pool),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            train=list(d["train"]),
            validation=list(d["validation"]),
            test=list(d["test"]),
            unlabeled_pool=list(d["unlabeled_pool"]),
            seed=int(d["seed"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_case(directory_path) -> MultiModalCase:
    """Load one case directory; modality tags come from filename suffixes."""
    directory = Path(directory_path)
    if not directory.is_dir():
        raise LoadError(f"case directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.name.endswith((".nii.gz", ".nii")))

    def stem(p: Path) -> str:
        name = p.name
        for suf in (".nii.gz", ".nii"):
            if name.endswith(suf):
                return name[: -len(suf)]
        return name

    def find(tag: str) -> Optional[Path]:
        matches = [p for p in files if stem(p).endswith(f"_{tag}")]
        if len(matches) > 1:
            raise LoadError(f"{directory}: multiple files match modality '{tag}'")
        return matches[0] if matches else None

    volumes = {}
    missing = []
    for mod in MODALITY_ORDER:
        path = find(mod.value)
        if path is None:
            missing.append(mod.value)
        else:
            volumes[mod] = ModalityVolume(mod, nifti.read_volume(path))
    if missing:
        raise LoadError(f"{directory}: missing modality files for {missing}")

    label = None
    seg_path = find("seg")
    if seg_path is not None:
        label = LabelMask(nifti.read_volume(seg_path))

    return MultiModalCase(
        case_id=directory.name,
        modalities=volumes,
        label=label,
        source=CaseSource.REAL,
    )


def save_mask(mask: LabelMask, path) -> None:
    """Persist a label mask; round-trips bit-exactly through read_volume."""
    nifti.write_volume(mask.data, path)


def save_case(case: MultiModalCase, directory_path) -> Path:
    """Write a case directory in the standard on-disk layout."""
    directory = Path(directory_path)
    directory.mkdir(parents=True, exist_ok=True)
    for mod in MODALITY_ORDER:
        nifti.write_volume(case.modalities[mod].data, directory / f"{case.case_id}_{mod.value}.nii.gz")
    if case.label is not None:
        save_mask(case.label, directory / f"{case.case_id}_seg.nii.gz")
    return directory


@dataclass
class PhantomSpec:
    """Geometry and intensity recipe for synthetic cases.

    Tumor geometry is drawn per case (seeded): the whole-tumor radius as a
    fraction of the smallest volume dimension, then core and enhancing radii
    as fractions of their parent, all sharing one per-axis stretch so the
    three ellipsoids stay concentric and nested. Intensities are per-region
    means per modality plus Gaussian noise; background stays exactly zero.
    """

    brain_axes_frac: tuple[float, float, float] = (0.46, 0.46, 0.46)
    wt_radius_frac: tuple[float, float] = (0.20, 0.28)
    tc_ratio: tuple[float, float] = (0.55, 0.72)
    et_ratio: tuple[float, float] = (0.50, 0.70)
    center_jitter_frac: float = 0.06
    axis_stretch: tuple[float, float] = (0.85, 1.0)
    noise_sigma: float = 0.04
    # modality -> (brain, edema, necrotic core, enhancing) mean intensities
    intensities: dict = field(
        default_factory=lambda: {
            Modality.T1: (1.0, 0.70, 0.45, 0.85),
            Modality.T1GD: (1.0, 0.80, 0.55, 2.0),
            Modality.T2: (0.70, 1.60, 1.20, 0.95),
            Modality.FLAIR: (0.80, 1.80, 1.15, 1.00),
        }
    )

    def __post_init__(self):
        for name, (lo, hi) in (
            ("wt_radius_frac", self.wt_radius_frac),
            ("tc_ratio", self.tc_ratio),
            ("et_ratio", self.et_ratio),
            ("axis_stretch", self.axis_stretch),
        ):
            if lo < 0 or hi < lo:
                raise ParameterError(f"{name} range ({lo}, {hi}) is invalid")
        if self.tc_ratio[1] > 1.0 or self.et_ratio[1] > 1.0:
            raise ParameterError("tumor radii must nest: tc_ratio and et_ratio must stay <= 1")
        if self.wt_radius_frac[1] + self.center_jitter_frac > min(self.brain_axes_frac):
            raise ParameterError("whole tumor can leave the brain: shrink radius or jitter")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        if r <= 0:
            return np.zeros(shape, dtype=bool)
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_phantom(
    seed: int,
    shape: tuple[int, int, int] = (32, 32, 32),
    tumor_spec: Optional[PhantomSpec] = None,
    case_id: Optional[str] = None,
) -> MultiModalCase:
    """Deterministically generate one synthetic labeled case."""
    spec = tumor_spec if tumor_spec is not None else PhantomSpec()
    if any(s < 16 for s in shape):
        raise ParameterError(f"phantom shape must be >= 16 per axis, got {shape}")
    rng = np.random.default_rng(seed)

    brain_center = tuple((s - 1) / 2.0 for s in shape)
    brain_radii = tuple(f * s for f, s in zip(spec.brain_axes_frac, shape))

    wt_r = rng.uniform(*spec.wt_radius_frac) * min(shape)
    tc_r = rng.uniform(*spec.tc_ratio) * wt_r
    et_r = rng.uniform(*spec.et_ratio) * tc_r
    stretch = rng.uniform(spec.axis_stretch[0], spec.axis_stretch[1], size=3)
    jitter = rng.uniform(-spec.center_jitter_frac, spec.center_jitter_frac, size=3)
    center = tuple(c + j * s for c, j, s in zip(brain_center, jitter, shape))

    wt_radii = tuple(wt_r * st for st in stretch)
    tc_radii = tuple(tc_r * st for st in stretch)
    et_radii = tuple(et_r * st for st in stretch)

    brain = _ellipsoid_mask(shape, brain_center, brain_radii)
    wt = _ellipsoid_mask(shape, center, wt_radii)
    tc = _ellipsoid_mask(shape, center, tc_radii)
    et = _ellipsoid_mask(shape, center, et_radii)

    label = np.zeros(shape, dtype=np.uint8)
    label[wt] = LABEL_EDEMA
    label[tc] = LABEL_NECROTIC
    label[et] = LABEL_ENHANCING

    volumes = {}
    for mod in MODALITY_ORDER:
        base, edema, core, enh = spec.intensities[mod]
        vals = np.zeros(shape, dtype=np.float64)
        vals[brain] = base
        vals[wt] = edema
        vals[tc] = core
        vals[et] = enh
        noise = rng.normal(0.0, spec.noise_sigma, size=shape)
        vals = np.where(brain, np.maximum(vals + noise, 0.01), 0.0)
        volumes[mod] = ModalityVolume(mod, vals.astype(np.float32))

    cid = case_id if case_id is not None else f"phantom_{seed:06d}"
    meta = {
        "brain_center": brain_center,
        "brain_radii": brain_radii,
        "tumor_center": center,
        "wt_radii": wt_radii,
        "tc_radii": tc_radii,
        "et_radii": et_radii,
    }
    return MultiModalCase(
        case_id=cid,
        modalities=volumes,
        label=LabelMask(label),
        source=CaseSource.PHANTOM,
        meta=meta,
    )


@dataclass
class SplitFractions:
    """Train/validation/test proportions; must sum to one."""

    train: float
    validation: float
    test: float

    def __post_init__(self):
        total = self.train + self.validation + self.test
        if any(f < 0 for f in (self.train, self.validation, self.test)):
            raise ConfigError("split fractions must be non-negative")
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {total}")

    @classmethod
    def from_counts(cls, n_train: int, n_validation: int, n_test: int) -> "SplitFractions":
        total = n_train + n_validation + n_test
        if total <= 0:
            raise ConfigError("split counts must be positive")
        return cls(n_train / total, n_validation / total, n_test / total)


@dataclass
class UnlabeledRule:
    """How much of validation and test is set aside as the unlabeled pool."""

    from_validation: float = 0.5
    from_test: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if not (0.0 <= self.from_validation <= 1.0 and 0.0 <= self.from_test <= 1.0):
            raise ConfigError("unlabeled-pool fractions must lie in [0, 1]")


def _apportion(n: int, fractions: SplitFractions) -> tuple[int, int, int]:
    # Largest-remainder apportionment: exact when fractions come from counts.
    quotas = [n * fractions.train, n * fractions.validation, n * fractions.test]
    base = [int(math.floor(q)) for q in quotas]
    short = n - sum(base)
    order = sorted(range(3), key=lambda i: quotas[i] - base[i], reverse=True)
    for i in range(short):
        base[order[i]] += 1
    return tuple(base)


def make_split(
    case_ids: Sequence[str],
    fractions: SplitFractions,
    unlabeled_rule: UnlabeledRule,
    seed: int,
) -> DatasetSplit:
    """Deterministic seeded split with the unlabeled pool carved out.

    The pool takes floor(|validation| * from_validation) cases from
    validation and floor(|test| * from_test) cases from test, removing them
    from their source lists.
    """
    ids = list(case_ids)
    if not ids:
        raise ContractError("case_ids must be non-empty")
    if len(set(ids)) != len(ids):
        raise ContractError("case_ids must be unique")

    # Canonicalize before shuffling so the split depends only on (id set, seed).
    ids = sorted(ids)
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n_train, n_val, n_test = _apportion(len(ids), fractions)

    train = shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    test = shuffled[n_train + n_val :]

    pool: list[str] = []
    if unlabeled_rule.enabled:
        k_val = int(math.floor(len(val) * unlabeled_rule.from_validation))
        k_test = int(math.floor(len(test) * unlabeled_rule.from_test))
        pool = val[:k_val] + test[:k_test]
        val = val[k_val:]
        test = test[k_test:]

    return DatasetSplit(train=train, validation=val, test=test, unlabeled_pool=pool, seed=seed)
