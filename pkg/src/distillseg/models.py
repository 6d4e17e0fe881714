"""The three 3D encoder-decoder families and full-volume inference.

All nets map (B, 4, P, P, P) patches to (B, 3, P, P, P) per-region
probabilities through a sigmoid head: the regions overlap (ET inside TC
inside WT), so channels are independent probabilities, not a softmax
partition. Normalization layers carry no running state, which makes
eval-mode inference a pure function of the parameters and input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .volume_io import MODALITY_ORDER, MultiModalCase


class NetworkKind(str, Enum):
    UNET3D = "unet3d"
    RESIDUAL_UNET3D = "residual_unet3d"
    CASCADED_UNET3D = "cascaded_unet3d"


# Fixed order used for tie-breaking in model selection.
KIND_ORDER = (NetworkKind.UNET3D, NetworkKind.RESIDUAL_UNET3D, NetworkKind.CASCADED_UNET3D)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    kind: NetworkKind
    base_channels: int = 8
    depth: int = 3
    norm: str = "instance"  # instance | group | batch
    num_groups: int = 8
    activation: str = "leaky_relu"  # relu | leaky_relu
    leaky_slope: float = 0.01
    upsampling: str = "trilinear"  # trilinear | transposed_conv
    in_channels: int = 4
    out_regions: int = 3

    def __post_init__(self):
        self.kind = NetworkKind(self.kind)
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be >= 2")
        if self.norm not in ("instance", "group", "batch"):
            raise ConfigError(f"unknown norm '{self.norm}'")
        if self.activation not in ("relu", "leaky_relu"):
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.upsampling not in ("trilinear", "transposed_conv"):
            raise ConfigError(f"unknown upsampling '{self.upsampling}'")
        if self.norm == "group":
            for width in self.level_widths():
                if width % self.num_groups != 0:
                    raise ConfigError(
                        f"num_groups={self.num_groups} does not divide channel width {width}"
                    )

    def level_widths(self) -> list[int]:
        """Feature-map widths per resolution level (doubling each level)."""
        return [self.base_channels * (2**i) for i in range(self.depth)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "kind": NetworkKind(d["kind"])})


def default_network_config(kind: NetworkKind, scale: str = "paper") -> NetworkConfig:
    """Per-kind defaults: depth 5 / base 16 at paper scale, 3 / 8 at desk scale."""
    if scale == "paper":
        depth, base = 5, 16
    elif scale == "desk":
        depth, base = 3, 8
    else:
        raise ConfigError(f"unknown scale '{scale}'")
    kind = NetworkKind(kind)
    if kind is NetworkKind.UNET3D:
        return NetworkConfig(kind=kind, depth=depth, base_channels=base,
                             norm="instance", activation="leaky_relu")
    if kind is NetworkKind.RESIDUAL_UNET3D:
        return NetworkConfig(kind=kind, depth=depth, base_channels=base,
                             norm="group", activation="relu")
    return NetworkConfig(kind=kind, depth=depth, base_channels=base,
                         norm="instance", activation="relu")


def _make_norm(norm: str, channels: int, num_groups: int) -> nn.Module:
    if norm == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if norm == "group":
        return nn.GroupNorm(num_groups, channels)
    return nn.BatchNorm3d(channels)


def _make_act(activation: str, slope: float) -> nn.Module:
    if activation == "leaky_relu":
        return nn.LeakyReLU(slope, inplace=True)
    return nn.ReLU(inplace=True)


class ConvBlock(nn.Module):
    """conv3x3x3 -> norm -> activation."""

    def __init__(self, in_ch, out_ch, cfg: NetworkConfig, stride=1):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = _make_norm(cfg.norm, out_ch, cfg.num_groups)
        self.act = _make_act(cfg.activation, cfg.leaky_slope)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DoubleConv(nn.Module):
    """Two ConvBlocks; the first may downsample with stride 2."""

    def __init__(self, in_ch, out_ch, cfg: NetworkConfig, stride=1):
        super().__init__()
        self.block1 = ConvBlock(in_ch, out_ch, cfg, stride=stride)
        self.block2 = ConvBlock(out_ch, out_ch, cfg)

    def forward(self, x):
        return self.block2(self.block1(x))


class ResidualBlock(nn.Module):
    """conv -> norm -> act -> conv -> norm around an identity skip, post-add act."""

    def __init__(self, channels, cfg: NetworkConfig):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = _make_norm(cfg.norm, channels, cfg.num_groups)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _make_norm(cfg.norm, channels, cfg.num_groups)
        self.act = _make_act(cfg.activation, cfg.leaky_slope)

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(x + y)


class BasicResidualBlock(nn.Module):
    """Identity skip around (conv -> instance norm -> ReLU) x 2, no post-add act."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Upsampler(nn.Module):
    def __init__(self, channels, cfg: NetworkConfig):
        super().__init__()
        if cfg.upsampling == "trilinear":
            self.up = nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False)
        else:
            self.up = nn.ConvTranspose3d(channels, channels, 2, stride=2)

    def forward(self, x):
        return self.up(x)


def _check_input(x: torch.Tensor, cfg: NetworkConfig) -> None:
    if x.ndim != 5:
        raise ShapeError(f"expected (B, C, D, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    factor = 2 ** (cfg.depth - 1)
    for dim in x.shape[2:]:
        if dim % factor != 0 or dim < factor:
            raise ShapeError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {factor} "
                f"(depth {cfg.depth})"
            )


class UNet3D(nn.Module):
    """Encoder-decoder with two conv blocks per level, strided downsampling,
    skip concatenations, and a sigmoid head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.level_widths()
        self.encoders = nn.ModuleList()
        for i, w in enumerate(widths):
            in_ch = cfg.in_channels if i == 0 else widths[i - 1]
            self.encoders.append(DoubleConv(in_ch, w, cfg, stride=1 if i == 0 else 2))
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):
            self.upsamplers.append(Upsampler(widths[i + 1], cfg))
            self.decoders.append(DoubleConv(widths[i + 1] + widths[i], widths[i], cfg))
        self.head = nn.Conv3d(widths[0], cfg.out_regions, 1)

    def forward(self, x):
        _check_input(x, self.cfg)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        y = skips[-1]
        for j, (up, dec) in enumerate(zip(self.upsamplers, self.decoders)):
            skip = skips[self.cfg.depth - 2 - j]
            y = dec(torch.cat([up(y), skip], dim=1))
        return torch.sigmoid(self.head(y))


class ResidualUNet3D(nn.Module):
    """Same macro-topology as UNet3D with residual blocks at every level."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.level_widths()
        self.entries = nn.ModuleList()
        self.enc_blocks = nn.ModuleList()
        for i, w in enumerate(widths):
            in_ch = cfg.in_channels if i == 0 else widths[i - 1]
            self.entries.append(ConvBlock(in_ch, w, cfg, stride=1 if i == 0 else 2))
            self.enc_blocks.append(ResidualBlock(w, cfg))
        self.upsamplers = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):
            self.upsamplers.append(Upsampler(widths[i + 1], cfg))
            self.merges.append(ConvBlock(widths[i + 1] + widths[i], widths[i], cfg))
            self.dec_blocks.append(ResidualBlock(widths[i], cfg))
        self.head = nn.Conv3d(widths[0], cfg.out_regions, 1)

    def forward(self, x):
        _check_input(x, self.cfg)
        skips = []
        for entry, block in zip(self.entries, self.enc_blocks):
            x = block(entry(x))
            skips.append(x)
        y = skips[-1]
        for j, (up, merge, block) in enumerate(
            zip(self.upsamplers, self.merges, self.dec_blocks)
        ):
            skip = skips[self.cfg.depth - 2 - j]
            y = block(merge(torch.cat([up(y), skip], dim=1)))
        return torch.sigmoid(self.head(y))


class CascadedUNet3D(nn.Module):
    """Four per-modality encoder branches fused by concatenation at each
    resolution, with a shared decoder and sigmoid head.

    Branches are structurally identical and built from basic residual blocks
    (conv -> instance norm -> ReLU twice, identity skip).
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.branch_widths = [max(1, cfg.base_channels // 4) * (2**i) for i in range(cfg.depth)]
        fused = [4 * w for w in self.branch_widths]

        def make_branch():
            levels = nn.ModuleList()
            for i, w in enumerate(self.branch_widths):
                in_ch = 1 if i == 0 else self.branch_widths[i - 1]
                levels.append(
                    nn.Sequential(
                        nn.Conv3d(in_ch, w, 3, stride=1 if i == 0 else 2, padding=1),
                        nn.InstanceNorm3d(w, affine=True),
                        nn.ReLU(inplace=True),
                        BasicResidualBlock(w),
                    )
                )
            return levels

        self.branches = nn.ModuleList(make_branch() for _ in range(len(MODALITY_ORDER)))
        self.upsamplers = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):
            self.upsamplers.append(Upsampler(fused[i + 1], cfg))
            self.merges.append(
                nn.Sequential(
                    nn.Conv3d(fused[i + 1] + fused[i], fused[i], 3, padding=1),
                    nn.InstanceNorm3d(fused[i], affine=True),
                    nn.ReLU(inplace=True),
                )
            )
            self.dec_blocks.append(BasicResidualBlock(fused[i]))
        self.head = nn.Conv3d(fused[0], cfg.out_regions, 1)

    def forward(self, x):
        _check_input(x, self.cfg)
        per_level: list[list[torch.Tensor]] = [[] for _ in range(self.cfg.depth)]
        for b, branch in enumerate(self.branches):
            feat = x[:, b : b + 1]
            for i, level in enumerate(branch):
                feat = level(feat)
                per_level[i].append(feat)
        skips = [torch.cat(feats, dim=1) for feats in per_level]
        y = skips[-1]
        for j, (up, merge, block) in enumerate(
            zip(self.upsamplers, self.merges, self.dec_blocks)
        ):
            skip = skips[self.cfg.depth - 2 - j]
            y = block(merge(torch.cat([up(y), skip], dim=1)))
        return torch.sigmoid(self.head(y))


_MODULE_FOR_KIND = {
    NetworkKind.UNET3D: UNet3D,
    NetworkKind.RESIDUAL_UNET3D: ResidualUNet3D,
    NetworkKind.CASCADED_UNET3D: CascadedUNet3D,
}


@dataclass(eq=False)
class Network:
    """A configured module plus its construction record."""

    config: NetworkConfig
    module: nn.Module

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    @property
    def kind(self) -> NetworkKind:
        return self.config.kind


def _init_weights(module: nn.Module, cfg: NetworkConfig) -> None:
    nonlinearity = "leaky_relu" if cfg.activation == "leaky_relu" else "relu"
    a = cfg.leaky_slope if cfg.activation == "leaky_relu" else 0.0
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=a, mode="fan_in", nonlinearity=nonlinearity)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Construct and initialize a network; deterministic in (config, seed)."""
    torch.manual_seed(seed)
    module = _MODULE_FOR_KIND[config.kind](config)
    _init_weights(module, config)
    return Network(config=config, module=module)


def build_unet(config: NetworkConfig, seed: int = 0) -> Network:
    if config.kind is not NetworkKind.UNET3D:
        raise ConfigError(f"build_unet got kind {config.kind}")
    return build_network(config, seed)


def build_residual_unet(config: NetworkConfig, seed: int = 0) -> Network:
    if config.kind is not NetworkKind.RESIDUAL_UNET3D:
        raise ConfigError(f"build_residual_unet got kind {config.kind}")
    return build_network(config, seed)


def build_cascaded_unet(config: NetworkConfig, seed: int = 0) -> Network:
    if config.kind is not NetworkKind.CASCADED_UNET3D:
        raise ConfigError(f"build_cascaded_unet got kind {config.kind}")
    return build_network(config, seed)


PROB_CLAMP = 1e-7


def forward(network: Network, inputs, mode: str = "eval"):
    """Run the network on a (B, 4, P, P, P) batch.

    Eval mode is deterministic and grad-free, and clamps probabilities away
    from exact 0/1 so downstream logs stay finite even for saturated inputs.
    Accepts numpy or torch inputs and returns the matching type.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    is_numpy = isinstance(inputs, np.ndarray)
    x = torch.as_tensor(np.ascontiguousarray(inputs)) if is_numpy else inputs
    param = next(network.module.parameters())
    x = x.to(param.dtype)
    if mode == "eval":
        network.module.eval()
        with torch.no_grad():
            probs = network.module(x).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    else:
        network.module.train()
        probs = network.module(x)
    return probs.numpy() if is_numpy else probs


def predict_case(
    network: Network,
    case: MultiModalCase,
    patch_size: int,
    overlap: float = 0.0,
) -> np.ndarray:
    """Sliding-window full-volume inference; overlapping windows are averaged.

    The case must already be normalized. Volumes smaller than the window are
    zero-padded symmetrically and the padding is cropped off the output.
    Returns per-region probabilities of shape (3, D, H, W).
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    vol = case.stacked()
    orig_shape = vol.shape[1:]
    pads = []
    for dim in orig_shape:
        total = max(0, patch_size - dim)
        pads.append((total // 2, total - total // 2))
    if any(p != (0, 0) for p in pads):
        vol = np.pad(vol, [(0, 0)] + pads, mode="constant", constant_values=0)
    shape = vol.shape[1:]

    step = max(1, int(round(patch_size * (1.0 - overlap))))
    axes_origins = []
    for dim in shape:
        origins = list(range(0, dim - patch_size + 1, step))
        if origins[-1] != dim - patch_size:
            origins.append(dim - patch_size)
        axes_origins.append(origins)

    prob_sum = np.zeros((network.config.out_regions,) + shape, dtype=np.float32)
    count = np.zeros(shape, dtype=np.float32)
    for od in axes_origins[0]:
        for oh in axes_origins[1]:
            for ow in axes_origins[2]:
                window = vol[:, od : od + patch_size, oh : oh + patch_size, ow : ow + patch_size]
                probs = forward(network, window[None], mode="eval")[0]
                prob_sum[
                    :, od : od + patch_size, oh : oh + patch_size, ow : ow + patch_size
                ] += probs
                count[od : od + patch_size, oh : oh + patch_size, ow : ow + patch_size] += 1.0
    result = prob_sum / count[None]

    crop = tuple(
        slice(p[0], p[0] + d) for p, d in zip(pads, orig_shape)
    )
    return np.ascontiguousarray(result[(slice(None),) + crop])


def save_checkpoint(network: Network, path, extra: Optional[dict] = None) -> Path:
    """Persist config + parameters; reload reproduces forward bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": network.config.kind.value,
        "config": network.config.to_dict(),
        "state_dict": network.module.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild a Network from a checkpoint; returns (network, extra)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version}")
    config = NetworkConfig.from_dict(payload["config"])
    module = _MODULE_FOR_KIND[config.kind](config)
    module.load_state_dict(payload["state_dict"])
    return Network(config=config, module=module), payload.get("extra", {})
