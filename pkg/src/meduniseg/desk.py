"""The standard desk-scale benchmark: three synthetic tasks over three pseudo-modalities.

- task 0: 3D sphere organ + tumour on a 1-channel pseudo-CT
- task 1: 3D cuboid on a 2-channel pseudo-MRI
- task 2: 2D disk on a 3-channel pseudo-fundus

plus a held-out 3D task on pseudo-CT for transfer experiments.
"""
from __future__ import annotations

from .backbone import ModelConfig, PromptConfig
from .registry import DatasetSpec, ModalityDescriptor, Registry, TaskDescriptor, build_registry
from .synth import PhantomSpec, generate_dataset
from .trainer import TrainConfig

DESK_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1))
DESK_PATCH_3D = (16, 32, 32)
DESK_PATCH_2D = (32, 32)

MODALITIES = [("pseudo-CT", 1, "3D"), ("pseudo-MRI", 2, "3D"), ("pseudo-fundus", 3, "2D")]
TASKS = [("sphere-organ-tumor", 3, 0), ("cuboid", 2, 1), ("disk", 2, 2)]


def desk_registry() -> Registry:
    return build_registry(MODALITIES, TASKS).freeze()


def desk_phantoms(registry: Registry, seed: int = 0) -> list[PhantomSpec]:
    t0, m0 = registry.resolve(0)
    t1, m1 = registry.resolve(1)
    t2, m2 = registry.resolve(2)
    return [
        PhantomSpec("sphere", t0, m0, DESK_PATCH_3D, (0.2,), (0.05,), (0.6, 1.2), 0.1, seed + 1, inner_ratio=0.6),
        PhantomSpec("cuboid", t1, m1, DESK_PATCH_3D, (0.5, -0.3), (0.05, 0.05), (-0.8,), 0.1, seed + 2),
        PhantomSpec("disk", t2, m2, (1, *DESK_PATCH_2D), (0.6, 0.3, 0.1), (0.05,) * 3, (0.7,), 0.1, seed + 3),
    ]


def heldout_phantom(seed: int = 0) -> PhantomSpec:
    """A downstream 3D task on the pseudo-CT modality (not in the upstream registry)."""
    modality = ModalityDescriptor(0, "pseudo-CT", 1, "3D")
    task = TaskDescriptor(0, "heldout-lesion", 2, 0)
    return PhantomSpec("sphere", task, modality, DESK_PATCH_3D, (0.2,), (0.05,), (0.5,), 0.1, seed + 100, radius_range=(0.35, 0.55))


def desk_datasets(registry: Registry | None = None, n_train: int = 24, n_test: int = 8, seed: int = 0) -> list[DatasetSpec]:
    registry = registry or desk_registry()
    return [generate_dataset(spec, n_train, n_test) for spec in desk_phantoms(registry, seed)]


def desk_model_config(variant: str = "MedUniSeg", width_scale: float = 0.5, max_class_count: int = 3) -> ModelConfig:
    return ModelConfig(
        width_scale=width_scale,
        stage_strides=DESK_STRIDES,
        patch_3d=DESK_PATCH_3D,
        patch_2d=DESK_PATCH_2D,
        prompt=PromptConfig(prompt_length=64, task_prompt_channels=16, fuse_blocks=3, fuse_reduction=4),
        variant=variant,
        max_class_count=max_class_count,
    )


def desk_train_config(iterations: int = 900, num_datasets: int = 3, seed: int = 0, per_dataset: int = 50) -> TrainConfig:
    """Poly schedule spread over exactly ``iterations`` steps."""
    per_epoch = per_dataset * num_datasets
    epochs = max(1, -(-iterations // per_epoch))
    return TrainConfig(
        max_epochs=epochs,
        iterations_per_dataset=per_dataset,
        batch_size_2d=4,
        batch_size_3d=2,
        seed=seed,
        max_iterations=iterations,
    )
