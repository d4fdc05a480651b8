"""Task / modality / dataset registry.

IDs are dense and assigned in registration order because they index the
modal prompt bank and the FUSE output channels directly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

DIMENSIONALITIES = ("2D", "3D")


class RegistryError(Exception):
    pass


class DuplicateIdError(RegistryError):
    def __init__(self, kind: str, conflicting_id: int):
        super().__init__(f"duplicate {kind} id {conflicting_id}")
        self.kind = kind
        self.conflicting_id = conflicting_id


class UnknownIdError(RegistryError, LookupError):
    pass


class FrozenRegistryError(RegistryError):
    pass


@dataclass(frozen=True)
class ModalityDescriptor:
    modal_id: int
    name: str
    channel_count: int
    dimensionality: str

    def __post_init__(self):
        if self.modal_id < 0:
            raise RegistryError(f"modal_id must be >= 0, got {self.modal_id}")
        if self.channel_count not in (1, 2, 3, 4):
            raise RegistryError(f"channel_count must be in 1..4, got {self.channel_count}")
        if self.dimensionality not in DIMENSIONALITIES:
            raise RegistryError(f"dimensionality must be one of {DIMENSIONALITIES}")

    @property
    def is_2d(self) -> bool:
        return self.dimensionality == "2D"


@dataclass(frozen=True)
class TaskDescriptor:
    task_id: int
    name: str
    class_count: int
    modal_id: int

    def __post_init__(self):
        if self.task_id < 0:
            raise RegistryError(f"task_id must be >= 0, got {self.task_id}")
        if self.class_count < 2:
            raise RegistryError(f"class_count must be >= 2 (background included), got {self.class_count}")


@dataclass
class Sample:
    """One image/label pair. image is [C, D, H, W] float32, label [D, H, W] uint8."""

    image: np.ndarray
    label: np.ndarray
    index: int
    task_id: int
    modal_id: int


@dataclass
class DatasetSpec:
    task: TaskDescriptor
    modality: ModalityDescriptor
    train_samples: list[Sample] = field(default_factory=list)
    test_samples: list[Sample] = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        train_idx = {s.index for s in self.train_samples}
        test_idx = {s.index for s in self.test_samples}
        if train_idx & test_idx:
            raise RegistryError(f"train/test overlap for task {self.task.task_id}: {sorted(train_idx & test_idx)}")
        for s in self.train_samples + self.test_samples:
            if (s.task_id, s.modal_id) != (self.task.task_id, self.modality.modal_id):
                raise RegistryError(
                    f"sample {s.index} routed to ({s.task_id}, {s.modal_id}), dataset is "
                    f"({self.task.task_id}, {self.modality.modal_id})"
                )

    @property
    def sample_count(self) -> int:
        return len(self.train_samples) + len(self.test_samples)


class Registry:
    def __init__(self):
        self._modalities: dict[int, ModalityDescriptor] = {}
        self._tasks: dict[int, TaskDescriptor] = {}
        self._frozen = False

    def register(self, descriptor: TaskDescriptor | ModalityDescriptor) -> "Registry":
        if self._frozen:
            raise FrozenRegistryError("registry is frozen")
        if isinstance(descriptor, ModalityDescriptor):
            self._insert(self._modalities, descriptor.modal_id, descriptor, "modality")
        elif isinstance(descriptor, TaskDescriptor):
            if descriptor.modal_id not in self._modalities:
                raise UnknownIdError(f"task {descriptor.task_id} references unknown modality {descriptor.modal_id}")
            self._insert(self._tasks, descriptor.task_id, descriptor, "task")
        else:
            raise TypeError(f"cannot register {type(descriptor).__name__}")
        return self

    @staticmethod
    def _insert(table: dict, key: int, value, kind: str) -> None:
        if key in table:
            raise DuplicateIdError(kind, key)
        if key != len(table):
            raise RegistryError(f"{kind} ids are dense: expected {len(table)}, got {key}")
        table[key] = value

    def add_modality(self, name: str, channel_count: int, dimensionality: str) -> ModalityDescriptor:
        desc = ModalityDescriptor(len(self._modalities), name, channel_count, dimensionality)
        self.register(desc)
        return desc

    def add_task(self, name: str, class_count: int, modal_id: int) -> TaskDescriptor:
        desc = TaskDescriptor(len(self._tasks), name, class_count, modal_id)
        self.register(desc)
        return desc

    def freeze(self) -> "Registry":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def resolve(self, task_id: int) -> tuple[TaskDescriptor, ModalityDescriptor]:
        try:
            task = self._tasks[task_id]
        except KeyError:
            raise UnknownIdError(f"unknown task id {task_id}") from None
        return task, self._modalities[task.modal_id]

    def modality(self, modal_id: int) -> ModalityDescriptor:
        try:
            return self._modalities[modal_id]
        except KeyError:
            raise UnknownIdError(f"unknown modality id {modal_id}") from None

    @property
    def tasks(self) -> list[TaskDescriptor]:
        return [self._tasks[k] for k in sorted(self._tasks)]

    @property
    def modalities(self) -> list[ModalityDescriptor]:
        return [self._modalities[k] for k in sorted(self._modalities)]

    @property
    def num_tasks(self) -> int:
        return len(self._tasks)

    @property
    def num_modalities(self) -> int:
        return len(self._modalities)

    @property
    def max_class_count(self) -> int:
        if not self._tasks:
            return 0
        return max(t.class_count for t in self._tasks.values())

    def copy(self) -> "Registry":
        """Unfrozen copy, used when fine-tuning adds a downstream task."""
        return Registry.from_records(self.to_records())

    # -- serialization -------------------------------------------------

    def to_records(self) -> list[dict]:
        records = [{"kind": "modality", **asdict(m)} for m in self.modalities]
        records += [{"kind": "task", **asdict(t)} for t in self.tasks]
        return records

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "Registry":
        reg = cls()
        records = list(records)
        for rec in records:
            rec = dict(rec)
            if rec.pop("kind") == "modality":
                reg.register(ModalityDescriptor(**rec))
        for rec in records:
            rec = dict(rec)
            if rec.pop("kind") == "task":
                reg.register(TaskDescriptor(**rec))
        return reg

    def to_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    @classmethod
    def from_text(cls, text: str) -> "Registry":
        return cls.from_records(json.loads(line) for line in text.splitlines() if line.strip())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Registry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def __eq__(self, other) -> bool:
        return isinstance(other, Registry) and self.to_records() == other.to_records()

    def __repr__(self) -> str:
        return f"Registry(modalities={self.num_modalities}, tasks={self.num_tasks}, frozen={self._frozen})"


def build_registry(modalities: Sequence[tuple[str, int, str]], tasks: Sequence[tuple[str, int, int]]) -> Registry:
    """Convenience: ``modalities`` as (name, channels, dim), ``tasks`` as (name, classes, modal_id)."""
    reg = Registry()
    for name, channels, dim in modalities:
        reg.add_modality(name, channels, dim)
    for name, classes, modal_id in tasks:
        reg.add_task(name, classes, modal_id)
    return reg
