import pytest
from hypothesis import given
from hypothesis import strategies as st

from meduniseg.registry import (
    DatasetSpec,
    DuplicateIdError,
    FrozenRegistryError,
    ModalityDescriptor,
    Registry,
    RegistryError,
    Sample,
    TaskDescriptor,
    UnknownIdError,
)


def _three_modalities(reg):
    for i, (c, d) in enumerate([(1, "3D"), (2, "3D"), (3, "2D")]):
        reg.register(ModalityDescriptor(i, f"m{i}", c, d))
    return reg


def test_max_class_count_tracks_largest_task():
    reg = _three_modalities(Registry())
    for tid, classes in enumerate([5, 6, 7]):
        reg.register(TaskDescriptor(tid, f"t{tid}", classes, modal_id=tid % 3))
    assert reg.max_class_count == 7


def test_single_binary_task():
    reg = _three_modalities(Registry())
    reg.register(TaskDescriptor(0, "t", 2, 0))
    assert reg.max_class_count == 2


def test_duplicate_task_id_rejected():
    reg = _three_modalities(Registry())
    reg.register(TaskDescriptor(0, "a", 2, 0))
    with pytest.raises(DuplicateIdError) as err:
        reg.register(TaskDescriptor(0, "b", 3, 1))
    assert err.value.conflicting_id == 0


def test_duplicate_modality_id_rejected():
    reg = _three_modalities(Registry())
    with pytest.raises(DuplicateIdError):
        reg.register(ModalityDescriptor(1, "again", 1, "3D"))


def test_ids_must_be_dense():
    reg = _three_modalities(Registry())
    with pytest.raises(RegistryError):
        reg.register(TaskDescriptor(3, "gap", 2, 0))


def test_resolve_returns_parent_modality():
    reg = _three_modalities(Registry())
    reg.register(TaskDescriptor(0, "t", 2, modal_id=2))
    task, modality = reg.resolve(0)
    assert task.task_id == 0 and modality.modal_id == 2


def test_resolve_unknown_on_empty_registry():
    with pytest.raises(UnknownIdError):
        Registry().resolve(99)


def test_task_needs_registered_modality():
    with pytest.raises(UnknownIdError):
        Registry().register(TaskDescriptor(0, "t", 2, 0))


def test_seventeen_tasks_resolve_without_collision():
    reg = Registry()
    for m in range(9):
        reg.add_modality(f"mod{m}", 1 + m % 4, "3D" if m < 5 else "2D")
    for t in range(17):
        reg.add_task(f"task{t}", 2 + t % 4, t % 9)
    seen = set()
    for t in range(17):
        task, modality = reg.resolve(t)
        assert task.task_id == t and modality.modal_id == t % 9
        seen.add(task.name)
    assert len(seen) == 17


@pytest.mark.parametrize(
    "kwargs",
    [dict(modal_id=0, name="x", channel_count=5, dimensionality="3D"), dict(modal_id=0, name="x", channel_count=1, dimensionality="4D")],
)
def test_bad_modality_descriptor(kwargs):
    with pytest.raises(RegistryError):
        ModalityDescriptor(**kwargs)


def test_class_count_at_least_two():
    with pytest.raises(RegistryError):
        TaskDescriptor(0, "t", 1, 0)


def test_frozen_registry_rejects_registration():
    reg = _three_modalities(Registry()).freeze()
    with pytest.raises(FrozenRegistryError):
        reg.add_task("t", 2, 0)
    # copies are writable again
    reg.copy().add_task("t", 2, 0)


def test_text_round_trip_is_byte_stable(tmp_path):
    reg = _three_modalities(Registry())
    reg.add_task("a", 3, 0)
    reg.add_task("b", 2, 2)
    path = tmp_path / "registry.jsonl"
    reg.save(path)
    again = Registry.load(path)
    assert again == reg
    path2 = tmp_path / "again.jsonl"
    again.save(path2)
    assert path.read_bytes() == path2.read_bytes()
    assert len(path.read_text().splitlines()) == 5


def test_dataset_spec_rejects_overlap_and_misrouting():
    import numpy as np

    task = TaskDescriptor(0, "t", 2, 0)
    modality = ModalityDescriptor(0, "m", 1, "3D")
    s = Sample(np.zeros((1, 2, 2, 2), np.float32), np.zeros((2, 2, 2), np.uint8), 0, 0, 0)
    with pytest.raises(RegistryError):
        DatasetSpec(task, modality, [s], [s])
    bad = Sample(s.image, s.label, 1, 1, 0)
    with pytest.raises(RegistryError):
        DatasetSpec(task, modality, [s], [bad])


@given(st.lists(st.integers(min_value=2, max_value=12), min_size=1, max_size=20))
def test_max_class_count_invariant(class_counts):
    reg = Registry()
    reg.add_modality("m", 1, "3D")
    for i, c in enumerate(class_counts):
        d = reg.add_task(f"t{i}", c, 0)
        assert reg.max_class_count == max(class_counts[: i + 1])
        assert reg.resolve(d.task_id)[0] == d
