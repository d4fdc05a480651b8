"""Six-stage 3D encoder-decoder shared by 2D (pseudo-3D) and 3D inputs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, RoutingError

NUM_STAGES = 6
DEFAULT_WIDTHS = (32, 64, 128, 256, 320, 320)
DEFAULT_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))
VARIANTS = (
    "MedUniSeg",
    "UniSeg",
    "MultiplePrompts",
    "UniversalPrompts",
    "FixedPrompts",
    "BottleneckPrompts",
    "MedUniSeg-T",
)


@dataclass(frozen=True)
class PromptConfig:
    prompt_length: int = 512
    task_prompt_channels: int = 100
    fuse_blocks: int = 3
    fuse_reduction: int = 4


@dataclass(frozen=True)
class ModelConfig:
    stage_widths: tuple[int, ...] = DEFAULT_WIDTHS
    width_scale: float = 1.0
    stage_strides: tuple[tuple[int, int, int], ...] = DEFAULT_STRIDES
    kernel_size: int = 3
    patch_3d: tuple[int, int, int] = (64, 192, 192)
    patch_2d: tuple[int, int] = (512, 512)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    variant: str = "MedUniSeg"
    max_class_count: int = 2
    negative_slope: float = 0.01
    norm_eps: float = 1e-5

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_scale))) for w in self.stage_widths)

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    @property
    def supervised_scales(self) -> int:
        # every decoder scale except the two coarsest
        return NUM_STAGES - 2

    @property
    def patch_2d_dims(self) -> tuple[int, int, int]:
        return (1, *self.patch_2d)

    @property
    def prompt_dims(self) -> tuple[int, int, int]:
        """Spatial dims of the universal task prompt: the 3D patch bottleneck."""
        return stage_shapes(self.patch_3d, self.stage_strides)[-1]

    def validate(self) -> "ModelConfig":
        if len(self.stage_widths) != NUM_STAGES or len(self.stage_strides) != NUM_STAGES:
            raise ConfigurationError(f"exactly {NUM_STAGES} stages required")
        if any(len(s) != 3 or min(s) < 1 for s in self.stage_strides):
            raise ConfigurationError(f"strides must be positive triples, got {self.stage_strides}")
        if tuple(self.stage_strides[0]) != (1, 1, 1):
            raise ConfigurationError(f"the first stage runs at full resolution; got stride {self.stage_strides[0]}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel size must be odd")
        if self.max_class_count < 2:
            raise ConfigurationError("max_class_count must be >= 2")
        p = self.prompt
        if p.fuse_blocks < 1 or p.fuse_reduction < 1 or p.prompt_length < 1 or p.task_prompt_channels < 1:
            raise ConfigurationError(f"invalid prompt config {p}")
        total = cumulative_strides(self.stage_strides)[-1]
        for axis, (n, s) in enumerate(zip(self.patch_3d, total)):
            if n % s:
                raise ConfigurationError(
                    f"3D patch {self.patch_3d}: axis {axis} size {n} not divisible by cumulative stride {s}"
                )
        for n, s in zip(self.patch_2d, total[1:]):
            if n % s:
                raise ConfigurationError(f"2D patch {self.patch_2d} not divisible by in-plane stride {total[1:]}")
        for dims in (self.patch_3d, self.patch_2d_dims):
            for stage, shape in enumerate(stage_shapes(dims, self.stage_strides)):
                if math.prod(shape) < 2:
                    # instance norm over a single voxel is identically zero
                    raise ConfigurationError(f"patch {dims}: stage {stage + 1} output {shape} is degenerate")
        return self

    def with_updates(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_strides"] = [list(s) for s in self.stage_strides]
        d["patch_3d"] = list(self.patch_3d)
        d["patch_2d"] = list(self.patch_2d)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_widths"] = tuple(d["stage_widths"])
        d["stage_strides"] = tuple(tuple(s) for s in d["stage_strides"])
        d["patch_3d"] = tuple(d["patch_3d"])
        d["patch_2d"] = tuple(d["patch_2d"])
        d["prompt"] = PromptConfig(**d["prompt"])
        return cls(**d)

    def architecture_key(self) -> dict:
        """Fields that must agree for parameters to be transferable."""
        d = self.to_dict()
        for k in ("variant", "max_class_count"):
            d.pop(k)
        return d


def cumulative_strides(strides: Sequence[Sequence[int]]) -> list[tuple[int, int, int]]:
    out, acc = [], (1, 1, 1)
    for s in strides:
        acc = tuple(a * b for a, b in zip(acc, s))
        out.append(acc)
    return out


def stage_shapes(input_dims: Sequence[int], strides: Sequence[Sequence[int]]) -> list[tuple[int, int, int]]:
    """Closed-form encoder output shape per stage; depth stays 1 for pseudo-3D input."""
    pseudo = input_dims[0] == 1
    shapes = []
    for acc in cumulative_strides(strides):
        d = 1 if pseudo else input_dims[0] // acc[0]
        shapes.append((d, input_dims[1] // acc[1], input_dims[2] // acc[2]))
    return shapes


def effective_stride(stride: Sequence[int], depth: int) -> tuple[int, int, int]:
    return (1 if depth == 1 else stride[0], stride[1], stride[2])


class PseudoConv3d(nn.Conv3d):
    """Conv3d that drops to its central depth slice when the input has depth 1.

    Numerically identical to zero-padding in depth, without the wasted work.
    """

    def forward(self, x):
        if x.shape[2] == 1 and self.kernel_size[0] > 1:
            c = self.kernel_size[0] // 2
            return F.conv3d(
                x,
                self.weight[:, :, c : c + 1],
                self.bias,
                (1, *self.stride[1:]),
                (0, *self.padding[1:]),
                self.dilation,
                self.groups,
            )
        if x.shape[2] == 1 and self.stride[0] > 1:
            return F.conv3d(x, self.weight, self.bias, (1, *self.stride[1:]), self.padding, self.dilation, self.groups)
        return super().forward(x)


class PseudoConvTranspose3d(nn.ConvTranspose3d):
    """Transposed conv with kernel == stride; in pseudo-3D mode the depth taps are averaged."""

    def forward(self, x, pseudo_3d: bool = False):
        if pseudo_3d and self.stride[0] > 1:
            return F.conv_transpose3d(x, self.weight.mean(dim=2, keepdim=True), self.bias, (1, *self.stride[1:]))
        return super().forward(x)


def make_conv(cin: int, cout: int, kernel: int = 3, stride=(1, 1, 1), bias: bool = True) -> PseudoConv3d:
    return PseudoConv3d(cin, cout, kernel, stride=tuple(stride), padding=kernel // 2, bias=bias)


class ConvBlock(nn.Module):
    """conv -> instance norm -> LeakyReLU"""

    def __init__(self, cin, cout, stride=(1, 1, 1), kernel=3, negative_slope=0.01, eps=1e-5):
        super().__init__()
        self.conv = make_conv(cin, cout, kernel, stride)
        self.norm = nn.InstanceNorm3d(cout, eps=eps, affine=True)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class StemBlock(nn.Module):
    """First block of stage 1 with one convolution per input channel count (1-4)."""

    def __init__(self, cout, kernel=3, negative_slope=0.01, eps=1e-5):
        super().__init__()
        self.stems = nn.ModuleList([make_conv(c, cout, kernel) for c in (1, 2, 3, 4)])
        self.norm = nn.InstanceNorm3d(cout, eps=eps, affine=True)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, x):
        c = x.shape[1]
        if not 1 <= c <= 4:
            raise RoutingError(f"no input stem for {c} channels (supported: 1-4)")
        return self.act(self.norm(self.stems[c - 1](x)))


@dataclass
class EncoderFeatures:
    skips: list[torch.Tensor]  # outputs of stages 1..5
    bottleneck: torch.Tensor  # stage 6 output F

    @property
    def pseudo_3d(self) -> bool:
        return self.skips[0].shape[2] == 1


@dataclass
class DecoderOutput:
    logits: list[torch.Tensor]  # finest first, one per supervised scale
    features: list[torch.Tensor]  # decoder stage outputs, coarsest first


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig, bottleneck_extra: int = 0, final_extra: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        w, k = config.widths, config.kernel_size
        kw = dict(negative_slope=config.negative_slope, eps=config.norm_eps)
        strides = config.stage_strides

        self.stem = StemBlock(w[0], k, **kw)
        stages = [nn.Sequential(ConvBlock(w[0], w[0], kernel=k, **kw))]
        for s in range(1, NUM_STAGES):
            stages.append(
                nn.Sequential(
                    ConvBlock(w[s - 1], w[s], stride=strides[s], kernel=k, **kw),
                    ConvBlock(w[s], w[s], kernel=k, **kw),
                )
            )
        self.encoder = nn.ModuleList(stages)

        # decoder stage u targets encoder stage NUM_STAGES - 2 - u
        self.upsamples = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for u in range(NUM_STAGES - 1):
            s = NUM_STAGES - 2 - u
            cin = w[s + 1] + (bottleneck_extra if u == 0 else 0)
            self.upsamples.append(PseudoConvTranspose3d(cin, w[s], strides[s + 1], stride=strides[s + 1]))
            self.decoder.append(
                nn.Sequential(ConvBlock(2 * w[s], w[s], kernel=k, **kw), ConvBlock(w[s], w[s], kernel=k, **kw))
            )
        # heads[i] serves scale i (0 = finest)
        self.heads = nn.ModuleList(
            [
                nn.Conv3d(w[i] + (final_extra if i == 0 else 0), config.max_class_count, 1)
                for i in range(config.supervised_scales)
            ]
        )
        self.apply(init_he)

    def encode(self, images: torch.Tensor) -> EncoderFeatures:
        if images.dim() != 5:
            raise RoutingError(f"expected [B, C, D, H, W] input, got shape {tuple(images.shape)}")
        x = self.stem(images)
        skips = []
        for s, stage in enumerate(self.encoder):
            x = stage(x)
            if s < NUM_STAGES - 1:
                skips.append(x)
        return EncoderFeatures(skips=skips, bottleneck=x)

    def decode(self, features: EncoderFeatures, bottleneck_input: torch.Tensor, final_prior=None) -> DecoderOutput:
        expected = self.upsamples[0].in_channels
        if bottleneck_input.shape[1] != expected:
            raise ConfigurationError(f"decoder expects {expected} bottleneck channels, got {bottleneck_input.shape[1]}")
        pseudo = features.pseudo_3d
        x = bottleneck_input
        outs = []
        for u, (up, block) in enumerate(zip(self.upsamples, self.decoder)):
            skip = features.skips[NUM_STAGES - 2 - u]
            x = up(x, pseudo_3d=pseudo)
            if x.shape[2:] != skip.shape[2:]:
                raise ConfigurationError(f"upsampled {tuple(x.shape[2:])} does not match skip {tuple(skip.shape[2:])}")
            x = block(torch.cat([x, skip], dim=1))
            outs.append(x)
        logits = []
        for i, head in enumerate(self.heads):
            feat = outs[len(outs) - 1 - i]
            if i == 0 and final_prior is not None:
                feat = torch.cat([feat, final_prior], dim=1)
            logits.append(head(feat))
        return DecoderOutput(logits=logits, features=outs)


def init_he(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(module.weight, a=1e-2)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
