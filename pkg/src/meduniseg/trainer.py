"""Universal joint training and the downstream fine-tuning protocol."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import ModelConfig
from .checkpoint import Checkpoint, LossRecord, tensor_digest
from .errors import ConfigurationError, LoadError, TrainingDivergedError
from .network import MedUniSegNet, build_model
from .objectives import masked_loss
from .registry import DatasetSpec, ModalityDescriptor, Registry, Sample, TaskDescriptor
from .synth import sample_batch

log = logging.getLogger(__name__)


def substream_seed(seed: int, name: str) -> int:
    """Independent seed for a named random stream derived from one run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 1000
    iterations_per_dataset: int = 50
    initial_lr: float = 0.01
    lr_exponent: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    grad_clip: float = 12.0
    batch_size_2d: int = 12
    batch_size_3d: int = 2
    seed: int = 0
    max_iterations: int | None = None

    def iterations_per_epoch(self, num_datasets: int) -> int:
        return self.iterations_per_dataset * num_datasets

    def total_iterations(self, num_datasets: int) -> int:
        total = self.max_epochs * self.iterations_per_epoch(num_datasets)
        return total if self.max_iterations is None else min(total, self.max_iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def poly_lr(epoch: float, max_epochs: int, initial_lr: float = 0.01, exponent: float = 0.9) -> float:
    return initial_lr * max(0.0, 1.0 - epoch / max_epochs) ** exponent


def lr_at(iteration: int, config: TrainConfig, num_datasets: int = 1) -> float:
    """Polynomial decay by epoch: lr0 * (1 - e / E) ** 0.9."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    epoch = iteration // config.iterations_per_epoch(num_datasets)
    return poly_lr(epoch, config.max_epochs, config.initial_lr, config.lr_exponent)


def epoch_schedule(num_datasets: int, quota: int, rng: np.random.Generator) -> np.ndarray:
    """Dataset index per iteration for one epoch: every dataset gets ``quota`` slots, shuffled."""
    return rng.permutation(np.repeat(np.arange(num_datasets), quota))


def batch_to_tensors(batch, dtype=torch.float32):
    return torch.from_numpy(batch.images).to(dtype), torch.from_numpy(batch.labels)


@dataclass
class TrainResult:
    history: list[LossRecord]
    optimizer: torch.optim.Optimizer
    iterations: int
    epoch: int
    param_names: dict[int, str] = field(default_factory=dict)

    def optimizer_state(self) -> dict[str, torch.Tensor]:
        out = {}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    out[self.param_names[id(p)]] = buf.detach().clone()
        return out


def make_optimizer(params: Iterable[nn.Parameter], cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        list(params),
        lr=cfg.initial_lr,
        momentum=cfg.momentum,
        nesterov=cfg.nesterov,
        weight_decay=cfg.weight_decay,
    )


def train_loop(
    model: nn.Module,
    datasets: Sequence[DatasetSpec],
    cfg: TrainConfig,
    params: Sequence[nn.Parameter] | None = None,
    frozen: Sequence[nn.Parameter] = (),
    forward: Callable | None = None,
    on_step: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    """Round-robin single-dataset iterations; one SGD step each.

    ``frozen`` parameters must never receive a gradient; if one does the run
    stops with an AssertionError.
    """
    if not datasets:
        raise ConfigurationError("at least one dataset is required")
    config: ModelConfig = model.config
    dtype = next(model.parameters()).dtype
    if params is None:
        params = [p for p in model.parameters() if p.requires_grad]
    names = {id(p): n for n, p in model.named_parameters()}
    optimizer = make_optimizer(params, cfg)
    forward = forward or (lambda m, x, b: m(x, b.task_id, b.modal_id))

    sample_rng = np.random.default_rng(substream_seed(cfg.seed, "sampling"))
    order_rng = np.random.default_rng(substream_seed(cfg.seed, "order"))
    n = len(datasets)
    total = cfg.total_iterations(n)
    history: list[LossRecord] = []
    model.train()
    it = 0
    epoch = 0
    while it < total:
        lr = poly_lr(epoch, cfg.max_epochs, cfg.initial_lr, cfg.lr_exponent)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for ds_idx in epoch_schedule(n, cfg.iterations_per_dataset, order_rng):
            if it >= total:
                break
            ds = datasets[ds_idx]
            if ds.modality.is_2d:
                bs, patch = cfg.batch_size_2d, config.patch_2d_dims
            else:
                bs, patch = cfg.batch_size_3d, config.patch_3d
            batch = sample_batch(ds, bs, sample_rng, patch=patch)
            images, labels = batch_to_tensors(batch, dtype)
            logits = forward(model, images, batch)
            report = masked_loss(logits, labels, ds.task.class_count)
            loss = report.value
            if not math.isfinite(loss):
                log.error("non-finite loss at iteration %d (task %d)", it, batch.task_id)
                raise TrainingDivergedError(it, loss)
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            for p in frozen:
                assert p.grad is None or not p.grad.any(), f"gradient reached frozen parameter {names.get(id(p))}"
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            rec = LossRecord(it, epoch, batch.task_id, loss, lr)
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            if it % 50 == 0:
                log.info("iter %d epoch %d task %d loss %.4f lr %.5f", it, epoch, batch.task_id, loss, lr)
            it += 1
        epoch += 1
    return TrainResult(history, optimizer, it, epoch, names)


def _check_datasets(registry: Registry, datasets: Sequence[DatasetSpec]) -> None:
    for ds in datasets:
        task, modality = registry.resolve(ds.task.task_id)
        if task != ds.task or modality != ds.modality:
            raise ConfigurationError(f"dataset {ds.task.name!r} routing disagrees with the registry")


def train_model(
    model_config: ModelConfig,
    train_config: TrainConfig,
    registry: Registry,
    datasets: Sequence[DatasetSpec],
    on_step=None,
) -> tuple[MedUniSegNet, TrainResult]:
    if not registry.frozen:
        registry.freeze()
    _check_datasets(registry, datasets)
    model = build_model(model_config, registry, seed=substream_seed(train_config.seed, "init"))
    result = train_loop(model, datasets, train_config, on_step=on_step)
    return model, result


def train_universal(
    model_config: ModelConfig,
    train_config: TrainConfig,
    registry: Registry,
    datasets: Sequence[DatasetSpec],
    on_step=None,
) -> Checkpoint:
    model, result = train_model(model_config, train_config, registry, datasets, on_step)
    return to_checkpoint(model, result, train_config)


def to_checkpoint(model: MedUniSegNet, result: TrainResult, train_config: TrainConfig, **metadata) -> Checkpoint:
    return Checkpoint.from_model(
        model,
        optimizer_state=result.optimizer_state(),
        train_config=train_config.to_dict(),
        epoch=result.epoch,
        iteration=result.iterations,
        loss_history=list(result.history),
        metadata=metadata,
    )


# -- fine-tuning ---------------------------------------------------------------


def _retag(samples: list[Sample], task_id: int, modal_id: int) -> list[Sample]:
    return [Sample(s.image, s.label, s.index, task_id, modal_id) for s in samples]


@dataclass
class FinetuneSetup:
    model: MedUniSegNet
    dataset: DatasetSpec
    frozen: list[nn.Parameter]
    frozen_digests: dict[str, str]
    new_modality: bool


def _matching_modality(registry: Registry, modality: ModalityDescriptor) -> ModalityDescriptor | None:
    for m in registry.modalities:
        if (m.name, m.channel_count, m.dimensionality) == (modality.name, modality.channel_count, modality.dimensionality):
            return m
    return None


def _nearest_modality(registry: Registry, modality: ModalityDescriptor) -> ModalityDescriptor | None:
    same_dim = [m for m in registry.modalities if m.dimensionality == modality.dimensionality]
    for m in same_dim:
        if m.channel_count == modality.channel_count:
            return m
    return same_dim[0] if same_dim else None


def prepare_finetune(
    checkpoint: Checkpoint,
    dataset: DatasetSpec,
    model_config: ModelConfig | None = None,
    modal_init: str = "fresh",
    seed: int = 0,
) -> FinetuneSetup:
    """Build the downstream model from an upstream checkpoint.

    The downstream task is appended to a copy of the registry. Encoder,
    decoder, MMap and the FUSE pathway are transferred; segmentation heads
    are freshly initialised; the prompt of an already-known modality is frozen.
    """
    if modal_init not in ("fresh", "nearest"):
        raise ConfigurationError(f"modal_init must be 'fresh' or 'nearest', got {modal_init!r}")
    base_cfg = checkpoint.model_config
    if model_config is not None and model_config.architecture_key() != base_cfg.architecture_key():
        diff = sorted(
            k for k, v in model_config.architecture_key().items() if base_cfg.architecture_key().get(k) != v
        )
        raise LoadError(f"architecture mismatch with checkpoint in fields {diff}")
    variant = model_config.variant if model_config is not None else base_cfg.variant
    if variant != base_cfg.variant:
        raise LoadError(f"checkpoint variant {base_cfg.variant!r} != requested {variant!r}")

    registry = checkpoint.registry.copy()
    known = _matching_modality(registry, dataset.modality)
    new_modality = known is None
    if new_modality:
        modality = registry.add_modality(dataset.modality.name, dataset.modality.channel_count, dataset.modality.dimensionality)
    else:
        modality = known
    task = registry.add_task(dataset.task.name, dataset.task.class_count, modality.modal_id)
    registry.freeze()
    ds = DatasetSpec(
        task,
        modality,
        _retag(dataset.train_samples, task.task_id, modality.modal_id),
        _retag(dataset.test_samples, task.task_id, modality.modal_id),
        seed=dataset.seed,
    )

    cfg = base_cfg.with_updates(max_class_count=registry.max_class_count)
    model = build_model(cfg, registry, seed=substream_seed(seed, "finetune-init"))
    own = model.state_dict()
    with torch.no_grad():
        for name, target in own.items():
            if name.startswith("backbone.heads."):
                continue
            src = checkpoint.params.get(name)
            if src is None:
                continue
            if tuple(src.shape) == tuple(target.shape):
                target.copy_(src)
            elif src.dim() == target.dim() and tuple(src.shape[1:]) == tuple(target.shape[1:]):
                # grown leading axis: new tasks / modalities keep their fresh init
                target[: src.shape[0]].copy_(src)
            else:
                raise LoadError(f"{name}: cannot transfer {tuple(src.shape)} into {tuple(target.shape)}")
        if new_modality and modal_init == "nearest" and model.modal_bank is not None and not model.modal_bank.universal:
            near = _nearest_modality(checkpoint.registry, dataset.modality)
            if near is not None:
                model.modal_bank.prompts[modality.modal_id].copy_(model.modal_bank.prompts[near.modal_id])

    frozen: list[nn.Parameter] = []
    if model.modal_bank is not None and not new_modality:
        idx = 0 if model.modal_bank.universal else modality.modal_id
        prompt = model.modal_bank.prompts[idx]
        prompt.requires_grad_(False)
        frozen.append(prompt)
    digests = {}
    for n, p in model.named_parameters():
        if any(p is f for f in frozen):
            digests[n] = tensor_digest(p)
    return FinetuneSetup(model, ds, frozen, digests, new_modality)


def finetune(
    checkpoint: Checkpoint,
    dataset: DatasetSpec,
    train_config: TrainConfig,
    model_config: ModelConfig | None = None,
    modal_init: str = "fresh",
    on_step=None,
) -> tuple[Checkpoint, FinetuneSetup]:
    setup = prepare_finetune(checkpoint, dataset, model_config, modal_init, seed=train_config.seed)
    result = train_loop(setup.model, [setup.dataset], train_config, frozen=setup.frozen, on_step=on_step)
    after = {n: tensor_digest(p) for n, p in setup.model.named_parameters() if n in setup.frozen_digests}
    if after != setup.frozen_digests:
        raise AssertionError("frozen modal prompt changed during fine-tuning")
    ckpt = to_checkpoint(
        setup.model,
        result,
        train_config,
        finetune_task=setup.dataset.task.task_id,
        frozen_prompt_sha256=setup.frozen_digests,
    )
    return ckpt, setup
