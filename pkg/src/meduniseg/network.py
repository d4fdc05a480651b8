"""The universal segmentation network: backbone + prompt pathways per variant."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import Backbone, DecoderOutput, ModelConfig
from .errors import ConfigurationError, RoutingError
from .prompting import ModalPromptBank, TaskPromptFusion, add_modal_prior, resample, variant_wiring
from .registry import Registry


class MedUniSegNet(nn.Module):
    def __init__(self, config: ModelConfig, registry: Registry):
        super().__init__()
        if registry.num_tasks == 0:
            raise ConfigurationError("registry has no tasks")
        if config.max_class_count != registry.max_class_count:
            raise ConfigurationError(
                f"config max_class_count {config.max_class_count} != registry {registry.max_class_count}"
            )
        config.validate()
        self.config = config
        self.registry = registry
        self.wiring = variant_wiring(config.variant)
        w = self.wiring
        p = config.prompt

        bottleneck_extra = 1 if w.task_site == "bottleneck" else 0
        final_extra = 1 if w.task_site == "decoder_end" else 0
        self.backbone = Backbone(config, bottleneck_extra=bottleneck_extra, final_extra=final_extra)

        fixed = not w.learnable_prompts
        self.modal_bank = None
        if w.modal_prompts is not None:
            self.modal_bank = ModalPromptBank(
                registry.num_modalities, p.prompt_length, universal=w.modal_prompts == "universal", fixed=fixed
            )
        self.fuse = TaskPromptFusion(
            config.bottleneck_channels,
            registry.num_tasks,
            p.task_prompt_channels,
            config.prompt_dims,
            blocks=p.fuse_blocks,
            reduction=p.fuse_reduction,
            specific=w.task_prompts == "specific",
            fixed=fixed,
            negative_slope=config.negative_slope,
            eps=config.norm_eps,
        )

    # -- routing ------------------------------------------------------------

    def route(self, images: torch.Tensor, task_id: int, modal_id: int) -> bool:
        """Validate (task_id, modal_id) against the input; returns whether the modality is 2D."""
        if not 0 <= task_id < self.registry.num_tasks:
            raise RoutingError(f"unknown task id {task_id}")
        if not 0 <= modal_id < self.registry.num_modalities:
            raise RoutingError(f"unknown modal id {modal_id}")
        modality = self.registry.modality(modal_id)
        if images.shape[1] != modality.channel_count:
            raise RoutingError(
                f"modality {modal_id} ({modality.name}) has {modality.channel_count} channels, input has {images.shape[1]}"
            )
        if modality.is_2d and images.shape[2] != 1:
            raise RoutingError(f"2D modality {modal_id} given depth {images.shape[2]}")
        return modality.is_2d

    def prompt_parameters(self) -> list[nn.Parameter]:
        params = [self.fuse.prompt]
        if self.modal_bank is not None:
            params += list(self.modal_bank.prompts)
        return params

    # -- forward ------------------------------------------------------------

    def forward_full(self, images: torch.Tensor, task_id: int, modal_id: int) -> DecoderOutput:
        is_2d = self.route(images, task_id, modal_id)
        w = self.wiring
        x = images
        if w.modal_site == "entry":
            x = add_modal_prior(x, self.modal_bank.prior(modal_id, x.shape[2:], is_2d))
        feats = self.backbone.encode(x)
        f = feats.bottleneck
        if w.modal_site == "bottleneck":
            f = f + self.modal_bank.prior(modal_id, f.shape[2:], is_2d)
            feats.bottleneck = f
        final_prior = None
        if w.task_site == "bottleneck":
            bottleneck_input = torch.cat([f, self.fuse(f, task_id)], dim=1)
        else:
            bottleneck_input = f
            if w.task_site == "decoder_end":
                final_prior = resample(self.fuse(f, task_id), images.shape[2:])
        return self.backbone.decode(feats, bottleneck_input, final_prior=final_prior)

    def forward(self, images: torch.Tensor, task_id: int, modal_id: int) -> list[torch.Tensor]:
        """Multi-scale logits, finest first, each with max_class_count channels."""
        return self.forward_full(images, task_id, modal_id).logits

    @torch.no_grad()
    def task_prior(self, images: torch.Tensor, task_id: int, modal_id: int) -> torch.Tensor:
        """Selected task prior at prompt resolution, [B, 1, d, h, w]."""
        is_2d = self.route(images, task_id, modal_id)
        x = images
        if self.wiring.modal_site == "entry":
            x = add_modal_prior(x, self.modal_bank.prior(modal_id, x.shape[2:], is_2d))
        f = self.backbone.encode(x).bottleneck
        if self.wiring.modal_site == "bottleneck":
            f = f + self.modal_bank.prior(modal_id, f.shape[2:], is_2d)
        return self.fuse.select(f, task_id)


def build_model(config: ModelConfig, registry: Registry, seed: int | None = None) -> MedUniSegNet:
    if not registry.frozen:
        raise ConfigurationError("registry must be frozen before building a model")
    if config.max_class_count != registry.max_class_count:
        config = config.with_updates(max_class_count=registry.max_class_count)
    if seed is None:
        return MedUniSegNet(config, registry)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MedUniSegNet(config, registry)
