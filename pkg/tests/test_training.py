import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from distillseg.errors import ConfigError, ContractError, TrainingDivergedError
from distillseg.models import NetworkKind, build_network, default_network_config
from distillseg.objectives import DiceReport, total_loss
from distillseg.preprocess import normalize_case, sample_batch
from distillseg.training import (
    OptimizerKind,
    OptimizerSpec,
    TrainConfig,
    default_config,
    lr_at,
    select_best,
    train_model,
)
from distillseg.volume_io import generate_phantom


def desk_cases(n, shape=(16, 16, 16), seed0=100):
    return [
        normalize_case(generate_phantom(seed0 + i, shape, case_id=f"t{i:02d}"))
        for i in range(n)
    ]


def tiny_train_config(**kw):
    defaults = dict(
        epochs=2,
        batch_size=2,
        patch_size=16,
        steps_per_epoch=2,
        optimizer=OptimizerSpec(OptimizerKind.ADAM, 1e-3, 0.60, 10),
        seed=0,
        augmentation=None,
        checkpoint_every=1,
        validate_every=1,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


TINY_NET = dict(depth=2, base_channels=4)


def tiny_net_config(kind):
    import dataclasses

    cfg = default_network_config(kind, scale="desk")
    return dataclasses.replace(cfg, **TINY_NET)


class TestDefaultConfig:
    def test_unet_settings(self):
        cfg = default_config(NetworkKind.UNET3D)
        assert cfg.optimizer.kind is OptimizerKind.ADAM
        assert cfg.optimizer.initial_lr == 2e-4
        assert cfg.optimizer.decay_rate == 0.60
        assert cfg.batch_size == 2
        assert cfg.epochs == 280

    def test_cascaded_settings(self):
        cfg = default_config(NetworkKind.CASCADED_UNET3D)
        assert cfg.optimizer.kind is OptimizerKind.SGD
        assert cfg.optimizer.initial_lr == 0.1
        assert cfg.optimizer.decay_rate == 0.85
        assert cfg.batch_size == 4
        assert cfg.epochs == 280

    def test_residual_matches_unet_optimizer(self):
        unet = default_config(NetworkKind.UNET3D)
        res = default_config(NetworkKind.RESIDUAL_UNET3D)
        assert res.optimizer == unet.optimizer
        assert res.batch_size == unet.batch_size


class TestLrSchedule:
    def test_epoch_zero(self):
        spec = OptimizerSpec(OptimizerKind.ADAM, 2e-4, 0.60, 50)
        assert lr_at(spec, 0) == 2e-4

    def test_two_decay_steps(self):
        spec = OptimizerSpec(OptimizerKind.ADAM, 2e-4, 0.60, 50)
        assert lr_at(spec, 100) == pytest.approx(2e-4 * 0.36)

    def test_no_decay_when_rate_is_one(self):
        spec = OptimizerSpec(OptimizerKind.SGD, 0.1, 1.0, 7)
        assert all(lr_at(spec, e) == 0.1 for e in range(40))

    @settings(max_examples=30, deadline=None)
    @given(
        lr=st.floats(1e-6, 1.0),
        rate=st.floats(0.01, 1.0),
        interval=st.integers(1, 20),
    )
    def test_non_increasing(self, lr, rate, interval):
        spec = OptimizerSpec(OptimizerKind.ADAM, lr, rate, interval)
        values = [lr_at(spec, e) for e in range(60)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_spec_bounds(self):
        with pytest.raises(ConfigError):
            OptimizerSpec(OptimizerKind.ADAM, -1.0, 0.5, 1)
        with pytest.raises(ConfigError):
            OptimizerSpec(OptimizerKind.ADAM, 1e-3, 1.5, 1)
        with pytest.raises(ConfigError):
            OptimizerSpec(OptimizerKind.ADAM, 1e-3, 0.5, 0)


class TestTrainModel:
    def test_unlabeled_train_case_rejected(self):
        cases = [c.unlabeled_view() for c in desk_cases(2)]
        with pytest.raises(ContractError):
            train_model(
                NetworkKind.UNET3D, cases, [], tiny_train_config(),
                network_config=tiny_net_config(NetworkKind.UNET3D),
            )

    def test_history_and_checkpoints(self, tmp_path):
        cases = desk_cases(3)
        config = tiny_train_config(epochs=3)
        trained = train_model(
            NetworkKind.UNET3D, cases, cases[:1], config,
            network_config=tiny_net_config(NetworkKind.UNET3D), out_dir=tmp_path,
        )
        assert len(trained.history) == 3
        assert all(np.isfinite(r.loss["total"]) for r in trained.history)
        assert trained.final_checkpoint.exists()
        assert (tmp_path / "unet3d" / "history.json").exists()
        assert trained.history[0].val_report is not None

    def test_epoch_zero_loss_deterministic(self):
        cases = desk_cases(2)
        config = tiny_train_config(epochs=1)
        net_cfg = tiny_net_config(NetworkKind.UNET3D)
        a = train_model(NetworkKind.UNET3D, cases, [], config, network_config=net_cfg)
        b = train_model(NetworkKind.UNET3D, cases, [], config, network_config=net_cfg)
        assert a.history[0].loss == b.history[0].loss

    def test_resume_from_checkpoint_is_bit_identical(self, tmp_path):
        cases = desk_cases(2)
        net_cfg = tiny_net_config(NetworkKind.UNET3D)
        full_cfg = tiny_train_config(epochs=3)
        full = train_model(
            NetworkKind.UNET3D, cases, [], full_cfg,
            network_config=net_cfg, out_dir=tmp_path / "full",
        )
        partial = train_model(
            NetworkKind.UNET3D, cases, [], tiny_train_config(epochs=2),
            network_config=net_cfg, out_dir=tmp_path / "part",
        )
        resumed = train_model(
            NetworkKind.UNET3D, cases, [], full_cfg,
            out_dir=tmp_path / "resumed", resume_from=partial.final_checkpoint,
        )
        assert len(resumed.history) == 1
        assert resumed.history[0].loss == full.history[2].loss

    def test_divergence_aborts_with_batch_ids(self, tmp_path):
        # resume from a checkpoint whose weights already went non-finite:
        # the very first step must abort and name the batch
        from distillseg.models import save_checkpoint

        cases = desk_cases(2)
        net = build_network(tiny_net_config(NetworkKind.UNET3D), seed=0)
        with torch.no_grad():
            next(net.module.parameters()).fill_(float("nan"))
        poisoned = save_checkpoint(net, tmp_path / "bad.ckpt", extra={"epoch": 0})
        with pytest.raises(TrainingDivergedError) as err:
            train_model(
                NetworkKind.UNET3D, cases, [], tiny_train_config(),
                resume_from=poisoned,
            )
        assert err.value.batch_case_ids

    def test_single_step_decreases_loss_at_small_lr(self):
        # three fixed batches, 64-bit: a tiny SGD step must reduce total_loss
        cases = desk_cases(2)
        for trial in range(3):
            net = build_network(tiny_net_config(NetworkKind.UNET3D), seed=trial)
            module = net.module.double()
            batch = sample_batch(cases, 16, seed=trial)
            x = torch.as_tensor(batch.inputs).double()
            g = torch.as_tensor(batch.targets.astype(np.float64))
            module.train()
            loss_before = total_loss(module(x), g).total
            module.zero_grad()
            loss_before.backward()
            with torch.no_grad():
                for p in module.parameters():
                    if p.grad is not None:
                        p -= 1e-6 * p.grad
            with torch.no_grad():
                loss_after = total_loss(module(x), g).total
            assert float(loss_after) < float(loss_before.detach())


TABLE_REPORTS = {
    NetworkKind.UNET3D: DiceReport(
        per_region={"ET": 0.71871, "TC": 0.81343, "WT": 0.84591},
        mean=(0.71871 + 0.81343 + 0.84591) / 3,
        n_cases=153,
    ),
    NetworkKind.RESIDUAL_UNET3D: DiceReport(
        per_region={"ET": 0.72585, "TC": 0.80872, "WT": 0.86415},
        mean=(0.72585 + 0.80872 + 0.86415) / 3,
        n_cases=153,
    ),
    NetworkKind.CASCADED_UNET3D: DiceReport(
        per_region={"ET": 0.72197, "TC": 0.81129, "WT": 0.85654},
        mean=(0.72197 + 0.81129 + 0.85654) / 3,
        n_cases=153,
    ),
}


class TestSelectBest:
    def test_published_standalone_scores_pick_residual(self):
        assert select_best(TABLE_REPORTS) is NetworkKind.RESIDUAL_UNET3D

    def test_all_equal_falls_back_to_fixed_order(self):
        report = DiceReport(per_region={"ET": 0.5, "TC": 0.5, "WT": 0.5}, mean=0.5, n_cases=1)
        reports = {k: report for k in TABLE_REPORTS}
        assert select_best(reports) is NetworkKind.UNET3D

    def test_sweep_winner_beats_higher_mean(self):
        a = DiceReport(per_region={"ET": 0.6, "TC": 0.6, "WT": 0.6}, mean=0.6, n_cases=1)
        b = DiceReport(per_region={"ET": 0.59, "TC": 0.59, "WT": 0.99}, mean=0.723, n_cases=1)
        winner = select_best({NetworkKind.UNET3D: b, NetworkKind.RESIDUAL_UNET3D: a})
        assert winner is NetworkKind.RESIDUAL_UNET3D

    def test_needs_two_reports(self):
        with pytest.raises(ContractError):
            select_best({NetworkKind.UNET3D: TABLE_REPORTS[NetworkKind.UNET3D]})

    @settings(max_examples=30, deadline=None)
    @given(
        scale=st.floats(0.1, 1.0),
        seed=st.integers(0, 2**31),
    )
    def test_invariant_under_uniform_rescaling(self, scale, seed):
        rng = np.random.default_rng(seed)
        reports = {}
        for kind in TABLE_REPORTS:
            scores = rng.uniform(0.2, 0.99, size=3)
            reports[kind] = DiceReport(
                per_region=dict(zip(("ET", "TC", "WT"), map(float, scores))),
                mean=float(scores.mean()),
                n_cases=3,
            )
        scaled = {
            kind: DiceReport(
                per_region={r: s * scale for r, s in rep.per_region.items()},
                mean=rep.mean * scale,
                n_cases=rep.n_cases,
            )
            for kind, rep in reports.items()
        }
        assert select_best(reports) is select_best(scaled)
