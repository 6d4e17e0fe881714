import numpy as np
import pytest
import torch

from _helpers import expected_unet_params, gradient_check, tiny_config
from distillseg.errors import ConfigError, ShapeError
from distillseg.models import (
    KIND_ORDER,
    BasicResidualBlock,
    NetworkConfig,
    NetworkKind,
    ResidualBlock,
    build_cascaded_unet,
    build_network,
    build_residual_unet,
    build_unet,
    default_network_config,
    forward,
    load_checkpoint,
    predict_case,
    save_checkpoint,
)
from distillseg.preprocess import normalize_case
from distillseg.volume_io import generate_phantom


def desk_config(kind):
    return default_network_config(kind, scale="desk")


class TestConfig:
    def test_level_widths_double(self):
        cfg = NetworkConfig(kind=NetworkKind.UNET3D, base_channels=8, depth=3)
        assert cfg.level_widths() == [8, 16, 32]

    def test_depth_and_width_bounds(self):
        with pytest.raises(ConfigError):
            NetworkConfig(kind=NetworkKind.UNET3D, depth=1)
        with pytest.raises(ConfigError):
            NetworkConfig(kind=NetworkKind.UNET3D, base_channels=1)

    def test_group_count_must_divide_widths(self):
        with pytest.raises(ConfigError):
            NetworkConfig(kind=NetworkKind.RESIDUAL_UNET3D, base_channels=4, norm="group", num_groups=8)

    def test_builders_enforce_kind(self):
        cfg = desk_config(NetworkKind.UNET3D)
        with pytest.raises(ConfigError):
            build_residual_unet(cfg)
        with pytest.raises(ConfigError):
            build_cascaded_unet(cfg)
        assert build_unet(cfg).kind is NetworkKind.UNET3D


class TestShapeContracts:
    @pytest.mark.parametrize("kind", KIND_ORDER)
    @pytest.mark.parametrize("patch,batch", [(16, 1), (32, 2)])
    def test_forward_shape_and_range(self, kind, patch, batch):
        net = build_network(desk_config(kind), seed=0)
        x = np.random.default_rng(0).normal(size=(batch, 4, patch, patch, patch)).astype(np.float32)
        probs = forward(net, x)
        assert probs.shape == (batch, 3, patch, patch, patch)
        assert probs.min() > 0.0
        assert probs.max() < 1.0

    @pytest.mark.parametrize("kind", KIND_ORDER)
    def test_indivisible_patch_rejected(self, kind):
        net = build_network(desk_config(kind), seed=0)
        x = np.zeros((1, 4, 30, 30, 30), dtype=np.float32)
        with pytest.raises(ShapeError):
            forward(net, x)

    @pytest.mark.parametrize("kind", KIND_ORDER)
    def test_zero_input_finite(self, kind):
        net = build_network(desk_config(kind), seed=0)
        x = np.zeros((1, 4, 16, 16, 16), dtype=np.float32)
        probs = forward(net, x)
        assert np.all(np.isfinite(probs))

    def test_all_zero_modality_finite(self):
        net = build_network(desk_config(NetworkKind.CASCADED_UNET3D), seed=0)
        x = np.random.default_rng(1).normal(size=(1, 4, 16, 16, 16)).astype(np.float32)
        x[:, 1] = 0.0
        probs = forward(net, x)
        assert np.all(np.isfinite(probs))

    @pytest.mark.parametrize("kind", KIND_ORDER)
    def test_eval_forward_deterministic(self, kind):
        net = build_network(desk_config(kind), seed=0)
        x = np.random.default_rng(2).normal(size=(1, 4, 16, 16, 16)).astype(np.float32)
        a = forward(net, x)
        b = forward(net, x)
        assert np.array_equal(a, b)

    def test_build_deterministic_in_seed(self):
        a = build_network(desk_config(NetworkKind.UNET3D), seed=5)
        b = build_network(desk_config(NetworkKind.UNET3D), seed=5)
        for pa, pb in zip(a.module.parameters(), b.module.parameters()):
            assert torch.equal(pa, pb)


class TestParameterArithmetic:
    def test_unet_parameter_count_closed_form(self):
        cfg = NetworkConfig(kind=NetworkKind.UNET3D, base_channels=8, depth=3)
        net = build_unet(cfg)
        assert net.parameter_count == expected_unet_params(8, 3)

    def test_unet_parameter_count_other_size(self):
        cfg = NetworkConfig(kind=NetworkKind.UNET3D, base_channels=4, depth=2)
        net = build_unet(cfg)
        assert net.parameter_count == expected_unet_params(4, 2)

    def test_cascade_branches_structurally_identical(self):
        net = build_cascaded_unet(desk_config(NetworkKind.CASCADED_UNET3D))
        counts = [
            sum(p.numel() for p in branch.parameters()) for branch in net.module.branches
        ]
        assert len(set(counts)) == 1


class TestResidualBlocks:
    def test_zeroed_residual_branch_is_post_add_activation(self):
        cfg = NetworkConfig(
            kind=NetworkKind.RESIDUAL_UNET3D, base_channels=8, depth=2,
            norm="group", num_groups=4, activation="relu",
        )
        block = ResidualBlock(8, cfg)
        with torch.no_grad():
            block.conv1.weight.zero_()
            block.conv1.bias.zero_()
            block.conv2.weight.zero_()
            block.conv2.bias.zero_()
        x = torch.randn(1, 8, 6, 6, 6)
        out = block(x)
        assert torch.equal(out, torch.relu(x))

    def test_zeroed_basic_block_is_identity(self):
        block = BasicResidualBlock(4)
        with torch.no_grad():
            for m in block.modules():
                if isinstance(m, torch.nn.Conv3d):
                    m.weight.zero_()
                    m.bias.zero_()
        x = torch.randn(1, 4, 6, 6, 6)
        assert torch.equal(block(x), x)

    def test_group_norm_statistics(self):
        # groups=4 over 8 channels -> per-group normalization to mean 0, var 1
        gn = torch.nn.GroupNorm(4, 8).double()
        x = torch.randn(2, 8, 5, 5, 5, dtype=torch.float64)
        y = gn(x)
        grouped = y.reshape(2, 4, 2 * 5 * 5 * 5)
        assert torch.allclose(grouped.mean(dim=2), torch.zeros(2, 4, dtype=torch.float64), atol=1e-6)
        assert torch.allclose(grouped.var(dim=2, unbiased=False), torch.ones(2, 4, dtype=torch.float64), atol=1e-4)

    def test_residual_unet_uses_group_norm(self):
        net = build_residual_unet(default_network_config(NetworkKind.RESIDUAL_UNET3D, "desk"))
        assert any(isinstance(m, torch.nn.GroupNorm) for m in net.module.modules())

    def test_norm_layers_carry_no_running_state(self):
        for kind in KIND_ORDER:
            net = build_network(desk_config(kind), seed=0)
            for m in net.module.modules():
                if isinstance(m, (torch.nn.InstanceNorm3d, torch.nn.GroupNorm)):
                    assert getattr(m, "track_running_stats", False) in (False, None)


class TestGradients:
    @pytest.mark.parametrize("kind", KIND_ORDER)
    def test_gradcheck_against_finite_differences(self, kind):
        worst = gradient_check(kind, n_params=20, patch=8, seed=0)
        assert worst < 1e-2, f"{kind.value}: worst relative error {worst}"


class TestPredictCase:
    def test_exact_patch_equals_single_forward(self, normalized_case):
        net = build_network(desk_config(NetworkKind.UNET3D), seed=0)
        tiled = predict_case(net, normalized_case, patch_size=32, overlap=0.0)
        single = forward(net, normalized_case.stacked()[None])[0]
        np.testing.assert_allclose(tiled, single, atol=1e-6)

    def test_constant_volume_tiling_matches_single_window(self):
        # constant input: every window sees identical content, so each tile of
        # a non-overlapping tiling must reproduce the single-window output
        from distillseg.volume_io import MODALITY_ORDER, LabelMask, ModalityVolume, MultiModalCase

        data = np.full((32, 32, 32), 0.7, dtype=np.float32)
        case = MultiModalCase(
            case_id="const",
            modalities={m: ModalityVolume(m, data) for m in MODALITY_ORDER},
            label=LabelMask(np.zeros((32, 32, 32), dtype=np.uint8)),
        )
        net = build_network(desk_config(NetworkKind.UNET3D), seed=0)
        tiled = predict_case(net, case, patch_size=16, overlap=0.0)
        window = forward(net, case.stacked()[None, :, :16, :16, :16])[0]
        for od in (0, 16):
            for oh in (0, 16):
                for ow in (0, 16):
                    np.testing.assert_allclose(
                        tiled[:, od : od + 16, oh : oh + 16, ow : ow + 16], window, atol=1e-6
                    )

    def test_small_volume_padded_and_cropped(self, small_phantom):
        case = normalize_case(small_phantom)
        net = build_network(desk_config(NetworkKind.UNET3D), seed=0)
        probs = predict_case(net, case, patch_size=24, overlap=0.0)
        assert probs.shape == (3, 16, 16, 16)
        assert np.all(np.isfinite(probs))

    def test_tiling_self_consistency_on_trained_model(self, overfit_smoke):
        # a fitted model must binarize to near-identical masks whether run
        # full-volume or as overlapping half-stride windows
        from distillseg.objectives import dice_metric

        net = overfit_smoke.trained.network
        case = overfit_smoke.cases[0]
        full = predict_case(net, case, patch_size=32, overlap=0.0) > 0.5
        tiled = predict_case(net, case, patch_size=16, overlap=0.5) > 0.5
        scores = [
            dice_metric(tiled[k].astype(np.uint8), full[k].astype(np.uint8)) for k in range(3)
        ]
        assert min(scores) >= 0.95, scores


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        net = build_network(desk_config(NetworkKind.RESIDUAL_UNET3D), seed=7)
        x = np.random.default_rng(0).normal(size=(1, 4, 16, 16, 16)).astype(np.float32)
        before = forward(net, x)
        path = save_checkpoint(net, tmp_path / "net.ckpt", extra={"epoch": 3})
        restored, extra = load_checkpoint(path)
        assert extra["epoch"] == 3
        assert restored.config == net.config
        assert np.array_equal(forward(restored, x), before)

    def test_bad_version_rejected(self, tmp_path):
        net = build_network(desk_config(NetworkKind.UNET3D), seed=0)
        path = save_checkpoint(net, tmp_path / "net.ckpt")
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)
