import pytest
import torch

from meduniseg.backbone import ModelConfig, PromptConfig
from meduniseg.registry import build_registry
from meduniseg.synth import PhantomSpec, generate_dataset
from meduniseg.trainer import TrainConfig

torch.set_num_threads(1)

# cumulative strides (4, 8, 8): 8x24x24 -> 2x3x3 bottleneck
MICRO_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1), (1, 1, 1))


def micro_config(variant="MedUniSeg", max_class_count=3, **kw) -> ModelConfig:
    params = dict(
        width_scale=1 / 16,
        stage_strides=MICRO_STRIDES,
        patch_3d=(8, 24, 24),
        patch_2d=(24, 24),
        prompt=PromptConfig(prompt_length=16, task_prompt_channels=4, fuse_blocks=3, fuse_reduction=4),
        variant=variant,
        max_class_count=max_class_count,
    )
    params.update(kw)
    return ModelConfig(**params)


def micro_registry():
    return build_registry(
        [("ct", 1, "3D"), ("mri", 2, "3D"), ("fundus", 3, "2D")],
        [("organ", 3, 0), ("box", 2, 1), ("disk", 2, 2)],
    ).freeze()


def micro_datasets(registry=None, n_train=4, n_test=2, seed=0):
    registry = registry or micro_registry()
    (t0, m0), (t1, m1), (t2, m2) = (registry.resolve(i) for i in range(3))
    specs = [
        PhantomSpec("sphere", t0, m0, (8, 24, 24), (0.2,), (0.05,), (0.6, 1.2), 0.1, seed + 1, inner_ratio=0.6),
        PhantomSpec("cuboid", t1, m1, (8, 24, 24), (0.5, -0.3), (0.05, 0.05), (-0.8,), 0.1, seed + 2),
        PhantomSpec("disk", t2, m2, (1, 24, 24), (0.6, 0.3, 0.1), (0.05,) * 3, (0.7,), 0.1, seed + 3),
    ]
    return [generate_dataset(s, n_train, n_test) for s in specs]


def micro_train_config(iterations=10, **kw) -> TrainConfig:
    params = dict(max_epochs=1, iterations_per_dataset=50, batch_size_2d=2, batch_size_3d=2, max_iterations=iterations)
    params.update(kw)
    return TrainConfig(**params)


@pytest.fixture
def registry():
    return micro_registry()


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Emit one PASS/FAIL line for an acceptance criterion, live and in the summary."""

    def emit(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
