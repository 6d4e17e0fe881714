"""End-to-end experiment orchestration with resumable stages.

The stage graph is linear: generate/ingest data, split, train the three
networks, evaluate them, fuse the ensemble, pseudo-label the pool, distill
a student, evaluate it, and write the manifest plus report files. Each
stage records a hash of the config sections it depends on (chained through
its parents), so re-running with an edited config re-executes exactly the
invalidated suffix, and a completed run is a no-op. Stage completion also
requires the stage's output files to still exist: deleting a checkpoint
re-runs just the stages that rebuild it.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig, config_to_dict, section_hash
from .distillation import (
    EnsembleSpec,
    FusionRule,
    PseudoLabeledCase,
    audit_pseudo_labels,
    build_distill_set,
    distill,
    evaluate_ensemble,
    pseudo_label,
)
from .errors import ConfigError, ContractError
from .models import (
    KIND_ORDER,
    NetworkConfig,
    NetworkKind,
    default_network_config,
    load_checkpoint,
)
from .objectives import DiceReport, evaluate_model
from .preprocess import normalize_case, labels_to_regions
from .training import OptimizerSpec, TrainConfig, default_config, select_best, train_model
from .volume_io import (
    CaseSource,
    DatasetSplit,
    LabelMask,
    MultiModalCase,
    PhantomSpec,
    SplitFractions,
    UnlabeledRule,
    generate_phantom,
    load_case,
    make_split,
    save_case,
    save_mask,
)
from . import nifti
from .reporting import emit_plots, emit_table, emit_csv

MANIFEST_SCHEMA_VERSION = 1
STUDENT_SEED_OFFSET = 9973

STAGE_ORDER = (
    "gen_data",
    "split",
    "train_unet3d",
    "train_residual_unet3d",
    "train_cascaded_unet3d",
    "evaluate_unet3d",
    "evaluate_residual_unet3d",
    "evaluate_cascaded_unet3d",
    "ensemble_eval",
    "pseudo_label",
    "distill",
    "evaluate_student",
)

_TRAIN_STAGES = tuple(f"train_{k.value}" for k in KIND_ORDER)
_EVAL_STAGES = tuple(f"evaluate_{k.value}" for k in KIND_ORDER)

_STAGE_PARENTS: dict[str, tuple[str, ...]] = {
    "gen_data": (),
    "split": ("gen_data",),
    **{s: ("split",) for s in _TRAIN_STAGES},
    **{e: (t,) for e, t in zip(_EVAL_STAGES, _TRAIN_STAGES)},
    "ensemble_eval": _TRAIN_STAGES,
    "pseudo_label": ("split",) + _TRAIN_STAGES,
    "distill": ("pseudo_label",) + _EVAL_STAGES,
    "evaluate_student": ("distill",),
}


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _atomic_write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(payload, f, indent=2)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class PipelineResult:
    manifest: dict
    manifest_path: Path
    executed: list[str]


class Pipeline:
    """One experiment run rooted at <out_dir>/<run_id>."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        self.run_dir = Path(config.out_dir) / config.run_id
        self.stages_path = self.run_dir / "stages.json"
        self.manifest_path = self.run_dir / "manifest.json"
        self._records: dict = {}
        if self.stages_path.exists():
            self._records = json.loads(self.stages_path.read_text())
        self.executed: list[str] = []
        self._raw: Optional[dict[str, MultiModalCase]] = None
        self._normalized: dict[str, MultiModalCase] = {}

    # ---------------------------------------------------------------- stages

    def _token(self, name: str) -> str:
        # Changes whenever the stage is (re-)executed, so children of a
        # re-run parent invalidate even if their own config is untouched.
        record = self._records[name]
        return f"{record['config_hash']}@{record['completed_at']}"

    def _stage(self, name: str, compute: Callable[[], tuple[dict, list[Path]]]) -> dict:
        config_hash = section_hash(
            self._config_part(name), *[self._token(p) for p in _STAGE_PARENTS[name]]
        )
        record = self._records.get(name)
        if record is not None and record["config_hash"] == config_hash:
            if all(Path(p).exists() for p in record["outputs"]):
                return record["payload"]
        payload, outputs = compute()
        self._records[name] = {
            "config_hash": config_hash,
            "outputs": [str(p) for p in outputs],
            "payload": payload,
            "completed_at": _now(),
        }
        _atomic_write_json(self.stages_path, self._records)
        self.executed.append(name)
        return payload

    def _config_part(self, name: str) -> str:
        """Hash of exactly the config sections this stage reads."""
        cfg = self.config
        general = dataclasses.replace(cfg.training, overrides={})
        if name == "gen_data":
            return section_hash(cfg.seed, cfg.data)
        if name == "split":
            return section_hash(cfg.seed, cfg.split)
        if name.startswith("train_"):
            kind = name[len("train_") :]
            return section_hash(
                cfg.seed, cfg.network, general, cfg.training.overrides.get(kind, {}), kind
            )
        if name.startswith("evaluate_") and name != "evaluate_student":
            return section_hash(cfg.evaluation)
        if name == "ensemble_eval":
            return section_hash(cfg.ensemble, cfg.evaluation)
        if name == "pseudo_label":
            return section_hash(cfg.ensemble, cfg.pseudo, cfg.evaluation.overlap)
        if name == "distill":
            return section_hash(cfg.seed, cfg.network, general, cfg.training.overrides)
        if name == "evaluate_student":
            return section_hash(cfg.evaluation)
        raise ConfigError(f"unknown stage '{name}'")

    # ------------------------------------------------------------- case data

    def _data_dir(self) -> Path:
        if self.config.data.source == "real":
            return Path(self.config.data.directory)
        return self.run_dir / "data"

    def _load_cases(self, case_ids: list[str]) -> dict[str, MultiModalCase]:
        if self._raw is None:
            root = self._data_dir()
            self._raw = {cid: load_case(root / cid) for cid in case_ids}
        return self._raw

    def _norm(self, case_id: str) -> MultiModalCase:
        if case_id not in self._normalized:
            self._normalized[case_id] = normalize_case(self._raw[case_id])
        return self._normalized[case_id]

    # ------------------------------------------------------------ run driver

    def run(self, until: Optional[str] = None) -> PipelineResult:
        """Execute stages in order (skipping completed ones) up to `until`,
        then write the manifest and report files."""
        if until is not None and until not in STAGE_ORDER:
            raise ConfigError(f"unknown stage '{until}'")
        stop = STAGE_ORDER.index(until) if until is not None else len(STAGE_ORDER) - 1
        state: dict = {}
        try:
            for name in STAGE_ORDER[: stop + 1]:
                self._execute(name, state)
        except Exception as exc:
            try:
                self._write_manifest(
                    state, failed={"stage": self._current_stage, "error": str(exc)}
                )
            except Exception:
                pass  # keep the original failure
            raise
        manifest = self._write_manifest(state, failed=None)
        if until is None:
            self._emit_reports(manifest)
        return PipelineResult(
            manifest=manifest, manifest_path=self.manifest_path, executed=list(self.executed)
        )

    _current_stage: str = ""

    def _execute(self, name: str, state: dict) -> None:
        self._current_stage = name
        if name == "gen_data":
            state["gen_data"] = self._stage(name, self._gen_data)
            self._load_cases(state["gen_data"]["case_ids"])
        elif name == "split":
            state["split"] = self._stage(name, lambda: self._split(state))
            state["split_obj"] = DatasetSplit.from_dict(state["split"])
        elif name.startswith("train_"):
            kind = NetworkKind(name[len("train_") :])
            state[name] = self._stage(name, lambda: self._train(kind, state))
        elif name.startswith("evaluate_") and name != "evaluate_student":
            kind = NetworkKind(name[len("evaluate_") :])
            state[name] = self._stage(name, lambda: self._evaluate(kind, state))
        elif name == "ensemble_eval":
            state[name] = self._stage(name, lambda: self._ensemble_eval(state))
        elif name == "pseudo_label":
            state[name] = self._stage(name, lambda: self._pseudo_label(state))
        elif name == "distill":
            state[name] = self._stage(name, lambda: self._distill(state))
        elif name == "evaluate_student":
            state[name] = self._stage(name, lambda: self._evaluate_student(state))

    # --------------------------------------------------------- stage bodies

    def _gen_data(self) -> tuple[dict, list[Path]]:
        cfg = self.config
        if cfg.data.source == "real":
            root = Path(cfg.data.directory)
            ids = sorted(p.name for p in root.iterdir() if p.is_dir())
            if not ids:
                raise ConfigError(f"no case directories under {root}")
            return {"case_ids": ids, "data_dir": str(root)}, []
        ph = cfg.data.phantom
        n_total = ph.n_train + ph.n_val + ph.n_test
        seeds = np.random.SeedSequence(cfg.seed).generate_state(n_total)
        root = self._data_dir()
        outputs = []
        ids = []
        for i in range(n_total):
            cid = f"phantom_{i:03d}"
            ids.append(cid)
            case_dir = root / cid
            case = generate_phantom(
                int(seeds[i]), tuple(ph.shape), tumor_spec=ph.spec, case_id=cid
            )
            save_case(case, case_dir)
            outputs.extend(sorted(case_dir.iterdir()))
        return {"case_ids": ids, "data_dir": str(root)}, outputs

    def _split(self, state: dict) -> tuple[dict, list[Path]]:
        cfg = self.config
        ids = state["gen_data"]["case_ids"]
        if cfg.split.fractions is not None:
            fractions = SplitFractions(*cfg.split.fractions)
        elif cfg.data.source == "phantom":
            ph = cfg.data.phantom
            fractions = SplitFractions.from_counts(ph.n_train, ph.n_val, ph.n_test)
        else:
            raise ConfigError("real data needs explicit split.fractions")
        rule = UnlabeledRule(
            from_validation=cfg.split.unlabeled_from_validation,
            from_test=cfg.split.unlabeled_from_test,
            enabled=cfg.split.unlabeled_enabled,
        )
        split = make_split(ids, fractions, rule, cfg.seed)
        path = self.run_dir / "split.json"
        split.save(path)
        return split.to_dict(), [path]

    def _network_config(self, kind: NetworkKind) -> NetworkConfig:
        base = default_network_config(kind, scale="desk")
        section = self.config.network
        updates = {"depth": section.depth, "base_channels": section.base_channels}
        if section.num_groups is not None:
            updates["num_groups"] = section.num_groups
        return dataclasses.replace(base, **updates)

    def _train_config(self, kind: NetworkKind, seed: int) -> TrainConfig:
        cfg = self.config
        paper = default_config(kind, scale="paper")
        t = cfg.training
        interval = max(1, t.epochs // 5)
        opt_fields = {
            "kind": paper.optimizer.kind,
            "initial_lr": paper.optimizer.initial_lr,
            "decay_rate": paper.optimizer.decay_rate,
            "decay_interval_epochs": interval,
            "momentum": paper.optimizer.momentum,
        }
        batch_size = paper.batch_size
        overrides = dict(t.overrides.get(kind.value, {}))
        if "batch_size" in overrides:
            batch_size = int(overrides.pop("batch_size"))
        unknown = set(overrides) - set(opt_fields)
        if unknown:
            raise ConfigError(f"unknown training override keys for {kind.value}: {sorted(unknown)}")
        opt_fields.update(overrides)
        return TrainConfig(
            epochs=t.epochs,
            batch_size=batch_size,
            patch_size=t.patch_size,
            steps_per_epoch=t.steps_per_epoch,
            optimizer=OptimizerSpec(**opt_fields),
            seed=seed,
            augmentation=t.augmentation if t.augmentation_enabled else None,
            checkpoint_every=t.checkpoint_every,
            validate_every=t.validate_every,
            eval_threshold=cfg.evaluation.threshold,
            eval_overlap=cfg.evaluation.overlap,
        )

    def _cases_for(self, id_list, unlabeled: bool = False) -> list[MultiModalCase]:
        cases = [self._norm(cid) for cid in id_list]
        if unlabeled:
            cases = [c.unlabeled_view() for c in cases]
        return cases

    def _train(self, kind: NetworkKind, state: dict) -> tuple[dict, list[Path]]:
        split: DatasetSplit = state["split_obj"]
        train_cases = self._cases_for(split.train)
        val_cases = self._cases_for(split.validation)
        seed = self.config.seed + KIND_ORDER.index(kind)
        train_cfg = self._train_config(kind, seed)
        net_cfg = self._network_config(kind)
        trained = train_model(
            kind, train_cases, val_cases, train_cfg,
            network_config=net_cfg, out_dir=self.run_dir,
        )
        ckpt = trained.final_checkpoint
        history = self.run_dir / kind.value / "history.json"
        payload = {
            "kind": kind.value,
            "checkpoint": str(ckpt),
            "history": str(history),
            "network_config": net_cfg.to_dict(),
            "train_config": _jsonable_train_config(train_cfg),
        }
        return payload, [ckpt, history]

    def _load_network(self, state: dict, stage: str):
        return load_checkpoint(state[stage]["checkpoint"])[0]

    def _evaluate(self, kind: NetworkKind, state: dict) -> tuple[dict, list[Path]]:
        split: DatasetSplit = state["split_obj"]
        network = self._load_network(state, f"train_{kind.value}")
        report = evaluate_model(
            network,
            self._cases_for(split.test),
            threshold=self.config.evaluation.threshold,
            patch_size=self.config.training.patch_size,
            overlap=self.config.evaluation.overlap,
        )
        return {"report": report.to_dict(), "test_case_ids": list(split.test)}, []

    def _members(self, state: dict) -> EnsembleSpec:
        members = [self._load_network(state, f"train_{k.value}") for k in KIND_ORDER]
        return EnsembleSpec(members=members, fusion=FusionRule(self.config.ensemble.fusion))

    def _ensemble_eval(self, state: dict) -> tuple[dict, list[Path]]:
        split: DatasetSplit = state["split_obj"]
        report = evaluate_ensemble(
            self._members(state),
            self._cases_for(split.test),
            threshold=self.config.evaluation.threshold,
            patch_size=self.config.training.patch_size,
            overlap=self.config.evaluation.overlap,
        )
        payload = {
            "fusion": self.config.ensemble.fusion,
            "members": [k.value for k in KIND_ORDER],
            "report": report.to_dict(),
            "test_case_ids": list(split.test),
        }
        return payload, []

    def _pseudo_label(self, state: dict) -> tuple[dict, list[Path]]:
        cfg = self.config
        split: DatasetSplit = state["split_obj"]
        if not split.unlabeled_pool:
            return {"cases": [], "audit_report": None, "threshold": cfg.pseudo.threshold}, []
        pool = self._cases_for(split.unlabeled_pool, unlabeled=True)
        labeled = pseudo_label(
            self._members(state),
            pool,
            threshold=cfg.pseudo.threshold,
            patch_size=cfg.training.patch_size,
            overlap=cfg.evaluation.overlap,
        )
        mask_dir = self.run_dir / "pseudo"
        mask_dir.mkdir(parents=True, exist_ok=True)
        outputs = []
        entries = []
        for item in labeled:
            path = mask_dir / f"{item.case.case_id}_seg.nii.gz"
            save_mask(item.case.label, path)
            outputs.append(path)
            entries.append(
                {
                    "case_id": item.case.case_id,
                    "mask_path": str(path),
                    "mean_confidence": item.mean_confidence,
                    "repaired_voxels": item.repaired_voxels,
                }
            )
        audit = None
        if cfg.pseudo.audit:
            withheld = {
                cid: self._raw[cid].label
                for cid in split.unlabeled_pool
                if self._raw[cid].label is not None
            }
            if len(withheld) == len(labeled):
                audit = audit_pseudo_labels(labeled, withheld).to_dict()
        payload = {
            "cases": entries,
            "audit_report": audit,
            "threshold": cfg.pseudo.threshold,
            "fusion": cfg.ensemble.fusion,
        }
        return payload, outputs

    def _selected_kind(self, state: dict) -> NetworkKind:
        reports = {
            kind: DiceReport.from_dict(state[f"evaluate_{kind.value}"]["report"])
            for kind in KIND_ORDER
        }
        return select_best(reports)

    def _rebuild_pseudo(self, state: dict) -> list[PseudoLabeledCase]:
        split: DatasetSplit = state["split_obj"]
        pool = {c.case_id: c for c in self._cases_for(split.unlabeled_pool, unlabeled=True)}
        rebuilt = []
        for entry in state["pseudo_label"]["cases"]:
            mask = LabelMask(nifti.read_volume(entry["mask_path"]))
            case = dataclasses.replace(
                pool[entry["case_id"]], label=mask, source=CaseSource.PSEUDO_LABELED
            )
            rebuilt.append(
                PseudoLabeledCase(
                    case=case,
                    region_target=labels_to_regions(mask),
                    mean_confidence=entry["mean_confidence"],
                    repaired_voxels=entry["repaired_voxels"],
                )
            )
        return rebuilt

    def _distill(self, state: dict) -> tuple[dict, list[Path]]:
        split: DatasetSplit = state["split_obj"]
        best = self._selected_kind(state)
        pseudo = self._rebuild_pseudo(state)
        distill_set = build_distill_set(self._cases_for(split.train), pseudo)
        seed = self.config.seed + STUDENT_SEED_OFFSET
        train_cfg = self._train_config(best, seed)
        net_cfg = self._network_config(best)
        student_dir = self.run_dir / "student"
        trained = distill(
            best, distill_set, self._cases_for(split.validation), train_cfg,
            network_config=net_cfg, out_dir=student_dir,
        )
        ckpt = trained.final_checkpoint
        history = student_dir / best.value / "history.json"
        payload = {
            "kind": best.value,
            "checkpoint": str(ckpt),
            "history": str(history),
            "network_config": net_cfg.to_dict(),
            "train_config": _jsonable_train_config(train_cfg),
            "n_distill_cases": len(distill_set),
        }
        return payload, [ckpt, history]

    def _evaluate_student(self, state: dict) -> tuple[dict, list[Path]]:
        split: DatasetSplit = state["split_obj"]
        network = load_checkpoint(state["distill"]["checkpoint"])[0]
        report = evaluate_model(
            network,
            self._cases_for(split.test),
            threshold=self.config.evaluation.threshold,
            patch_size=self.config.training.patch_size,
            overlap=self.config.evaluation.overlap,
        )
        return {"report": report.to_dict(), "test_case_ids": list(split.test)}, []

    # ------------------------------------------------------------- manifest

    def _write_manifest(self, state: dict, failed: Optional[dict]) -> dict:
        cfg = self.config
        manifest: dict = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "run_id": cfg.run_id,
            "seed": cfg.seed,
            "run_dir": str(self.run_dir),
            "written_at": _now(),
            "config": config_to_dict(cfg),
            "failed_stage": failed,
        }
        if "split" in state:
            manifest["split"] = state["split"]
        models = {}
        for kind in KIND_ORDER:
            train = state.get(f"train_{kind.value}")
            if train is None:
                continue
            entry = dict(train)
            ev = state.get(f"evaluate_{kind.value}")
            entry["report"] = ev["report"] if ev else None
            models[kind.value] = entry
        if models:
            manifest["models"] = models
        if "ensemble_eval" in state:
            manifest["ensemble"] = state["ensemble_eval"]
        if "pseudo_label" in state:
            manifest["pseudo_labels"] = state["pseudo_label"]
        if "distill" in state:
            student = dict(state["distill"])
            ev = state.get("evaluate_student")
            student["report"] = ev["report"] if ev else None
            manifest["student"] = student
            manifest["selected_kind"] = state["distill"]["kind"]
        test_ids = self._consistent_test_ids(state)
        if test_ids is not None:
            manifest["test_case_ids"] = test_ids
        self._check_manifest(manifest)
        _atomic_write_json(self.manifest_path, manifest)
        return manifest

    def _consistent_test_ids(self, state: dict) -> Optional[list[str]]:
        id_sets = []
        for name, payload in state.items():
            if isinstance(payload, dict) and "test_case_ids" in payload:
                id_sets.append(tuple(payload["test_case_ids"]))
        if not id_sets:
            return None
        if len(set(id_sets)) != 1:
            raise ContractError("evaluation stages used different test-case id sets")
        return list(id_sets[0])

    def _check_manifest(self, manifest: dict) -> None:
        for entry in list(manifest.get("models", {}).values()) + (
            [manifest["student"]] if "student" in manifest else []
        ):
            ckpt = entry.get("checkpoint")
            if ckpt and not Path(ckpt).exists():
                raise ContractError(f"manifest references a missing checkpoint: {ckpt}")

    def _emit_reports(self, manifest: dict) -> None:
        table = emit_table(manifest)
        (self.run_dir / "table.txt").write_text(table)
        (self.run_dir / "table.csv").write_text(emit_csv(manifest))
        emit_plots(manifest, self.run_dir / "plots")


def _jsonable_train_config(cfg: TrainConfig) -> dict:
    from .config import _to_jsonable

    return _to_jsonable(cfg)


def run_pipeline(
    config_path,
    run_id: Optional[str] = None,
    seed: Optional[int] = None,
) -> PipelineResult:
    """Load a config file and run the full pipeline; resumable per run_id."""
    from .config import load_config

    config = load_config(config_path, run_id=run_id, seed=seed)
    return Pipeline(config).run()
