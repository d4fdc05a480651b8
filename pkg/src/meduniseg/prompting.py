"""Modal priors (MMap pathway) and task priors (FUSE pathway), plus ablation wiring."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import VARIANTS, ConvBlock, make_conv
from .errors import ConfigurationError, RoutingError, ShapeError

MMAP_SIZE = 144
GRID_2D = (12, 12)
GRID_3D = (4, 6, 6)
PROMPT_INIT_STD = 0.02


def resample(x: torch.Tensor, size) -> torch.Tensor:
    """Linear resampling of a [B, C, D, H, W] tensor, corners not aligned."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


@dataclass(frozen=True)
class Wiring:
    variant: str
    modal_site: str | None  # "entry" | "bottleneck" | None
    task_site: str | None  # "bottleneck" | "decoder_end"
    modal_prompts: str | None  # "specific" | "universal" | None
    task_prompts: str  # "universal" | "specific"
    learnable_prompts: bool = True

    @property
    def injection_sites(self) -> tuple[tuple[str, str], ...]:
        sites = []
        if self.modal_site:
            sites.append(("modal", self.modal_site))
        if self.task_site:
            sites.append(("task", self.task_site))
        return tuple(sites)


_WIRING = {
    "MedUniSeg": Wiring("MedUniSeg", "entry", "bottleneck", "specific", "universal"),
    "UniSeg": Wiring("UniSeg", None, "bottleneck", None, "universal"),
    "MultiplePrompts": Wiring("MultiplePrompts", "entry", "bottleneck", "specific", "specific"),
    "UniversalPrompts": Wiring("UniversalPrompts", "entry", "bottleneck", "universal", "universal"),
    "FixedPrompts": Wiring("FixedPrompts", "entry", "bottleneck", "specific", "universal", learnable_prompts=False),
    "BottleneckPrompts": Wiring("BottleneckPrompts", "bottleneck", "bottleneck", "specific", "universal"),
    "MedUniSeg-T": Wiring("MedUniSeg-T", "entry", "decoder_end", "specific", "universal"),
}
assert set(_WIRING) == set(VARIANTS)


def variant_wiring(variant: str) -> Wiring:
    try:
        return _WIRING[variant]
    except KeyError:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}") from None


def _prompt_param(shape, zero: bool) -> nn.Parameter:
    data = torch.zeros(shape) if zero else torch.randn(shape) * PROMPT_INIT_STD
    return nn.Parameter(data, requires_grad=not zero)


class ModalPromptBank(nn.Module):
    """Learnable modal prompts and the shared MMap affine map (l -> 144).

    With ``universal=True`` a single prompt is mapped to ``144 * M`` values and
    the modality's chunk is selected afterwards.
    """

    def __init__(self, num_modalities: int, prompt_length: int, universal: bool = False, fixed: bool = False):
        super().__init__()
        self.num_modalities = num_modalities
        self.universal = universal
        n = 1 if universal else num_modalities
        self.prompts = nn.ParameterList([_prompt_param((prompt_length,), fixed) for _ in range(n)])
        self.mmap = nn.Linear(prompt_length, MMAP_SIZE * (num_modalities if universal else 1))
        nn.init.zeros_(self.mmap.bias)

    def mapped(self, modal_id: int) -> torch.Tensor:
        if not 0 <= modal_id < self.num_modalities:
            raise RoutingError(f"unknown modal id {modal_id}")
        if self.universal:
            return self.mmap(self.prompts[0])[modal_id * MMAP_SIZE : (modal_id + 1) * MMAP_SIZE]
        return self.mmap(self.prompts[modal_id])

    def prior(self, modal_id: int, spatial, is_2d: bool) -> torch.Tensor:
        """Modal prior as a [1, D, H, W] volume."""
        spatial = tuple(int(s) for s in spatial)
        if min(spatial) < 1:
            raise ShapeError(f"target dims must be positive, got {spatial}")
        v = self.mapped(modal_id)
        if is_2d:
            if spatial[0] != 1:
                raise ShapeError(f"2D prior requested for depth {spatial[0]}")
            grid = v.view(1, 1, *GRID_2D)
            out = grid if tuple(spatial[1:]) == GRID_2D else F.interpolate(
                grid, size=spatial[1:], mode="bilinear", align_corners=False
            )
            return out.view(1, *spatial)
        grid = v.view(1, 1, *GRID_3D)
        return resample(grid, spatial).view(1, *spatial)


def mmap_apply(bank: ModalPromptBank, modal_id: int, target_shape, dimensionality: str) -> torch.Tensor:
    """``target_shape`` is (C, D, H, W); returns the [1, D, H, W] prior."""
    return bank.prior(modal_id, tuple(target_shape)[-3:], dimensionality == "2D")


def add_modal_prior(images: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    if prior.dim() != 4 or prior.shape[0] != 1 or prior.shape[1:] != images.shape[2:]:
        raise ShapeError(f"prior {tuple(prior.shape)} does not match input spatial dims {tuple(images.shape[2:])}")
    return images + prior


class TaskPromptFusion(nn.Module):
    """FUSE: concat(task prompt, F) -> conv blocks -> split into N maps -> select.

    The first block reduces (K + C1) channels to (K + C1) // reduction; later
    blocks keep that width and the last convolution emits one map per task
    without normalisation or activation.
    """

    def __init__(
        self,
        feature_channels: int,
        num_tasks: int,
        prompt_channels: int,
        prompt_dims,
        blocks: int = 3,
        reduction: int = 4,
        specific: bool = False,
        fixed: bool = False,
        negative_slope: float = 0.01,
        eps: float = 1e-5,
    ):
        super().__init__()
        if blocks < 1:
            raise ConfigurationError("FUSE needs at least one block")
        self.num_tasks = num_tasks
        self.specific = specific
        self.prompt_dims = tuple(prompt_dims)
        n_prompts = num_tasks if specific else 1
        self.prompt = _prompt_param((n_prompts, prompt_channels, *self.prompt_dims), fixed)
        cin = prompt_channels + feature_channels
        mid = max(1, cin // reduction)
        out = 1 if specific else num_tasks
        layers: list[nn.Module] = []
        width = cin
        for _ in range(blocks - 1):
            layers.append(ConvBlock(width, mid, negative_slope=negative_slope, eps=eps))
            width = mid
        layers.append(make_conv(width, out, 3))
        self.blocks = nn.Sequential(*layers)

    @property
    def final_conv(self) -> nn.Conv3d:
        return self.blocks[-1]

    def _check(self, task_id: int) -> None:
        if not 0 <= task_id < self.num_tasks:
            raise RoutingError(f"task id {task_id} out of range for {self.num_tasks} tasks")

    def task_maps(self, features: torch.Tensor, task_id: int = 0) -> torch.Tensor:
        """Pre-split FUSE output at prompt resolution: [B, N, d, h, w] (or [B, 1, ...] for specific prompts)."""
        self._check(task_id)
        f = resample(features, self.prompt_dims)
        prompt = self.prompt[task_id if self.specific else 0]
        prompt = prompt.unsqueeze(0).expand(f.shape[0], *prompt.shape)
        return self.blocks(torch.cat([prompt, f], dim=1))

    def select(self, features: torch.Tensor, task_id: int) -> torch.Tensor:
        """Selected task prior at prompt resolution, [B, 1, d, h, w]."""
        maps = self.task_maps(features, task_id)
        if self.specific:
            return maps
        return torch.split(maps, 1, dim=1)[task_id]

    def forward(self, features: torch.Tensor, task_id: int) -> torch.Tensor:
        return resample(self.select(features, task_id), features.shape[2:])


def fuse_apply(fuse: TaskPromptFusion, features: torch.Tensor, task_id: int) -> torch.Tensor:
    return fuse(features, task_id)
