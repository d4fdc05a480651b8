"""Self-describing checkpoint directories.

Layout::

    manifest.json        shapes, configs, counters (no timestamps)
    registry.jsonl       registry snapshot
    params/<name>.f32    raw little-endian float32, one file per parameter
    optimizer/<name>.f32 momentum buffers keyed by parameter name
    loss_history.csv
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig
from .errors import LoadError
from .registry import Registry

CHECKPOINT_FORMAT = "meduniseg-checkpoint/1"
HISTORY_FIELDS = ("iteration", "epoch", "task_id", "loss", "lr")


@dataclass
class LossRecord:
    iteration: int
    epoch: int
    task_id: int
    loss: float
    lr: float


def history_to_csv(history: list[LossRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r.iteration, r.epoch, r.task_id, repr(float(r.loss)), repr(float(r.lr))])
    return buf.getvalue()


def history_from_csv(text: str) -> list[LossRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        LossRecord(int(r["iteration"]), int(r["epoch"]), int(r["task_id"]), float(r["loss"]), float(r["lr"]))
        for r in rows
    ]


def write_arrays(directory: Path, arrays: dict[str, torch.Tensor]) -> list[dict]:
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(arrays):
        arr = arrays[name].detach().cpu().numpy().astype("<f4")
        arr.tofile(directory / f"{name}.f32")
        entries.append({"name": name, "shape": list(arr.shape)})
    return entries


def read_arrays(directory: Path, entries: list[dict]) -> dict[str, torch.Tensor]:
    out = {}
    for e in entries:
        path = directory / f"{e['name']}.f32"
        if not path.exists():
            raise LoadError(f"missing array file {path}")
        arr = np.fromfile(path, dtype="<f4")
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expected:
            raise LoadError(f"{path}: {arr.size} values, manifest expects shape {e['shape']}")
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return out


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def directory_digest(directory) -> str:
    """sha256 over every file (relative path + content) in a directory tree."""
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in directory.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(directory)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    registry: Registry
    params: dict[str, torch.Tensor]
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    train_config: dict | None = None
    epoch: int = 0
    iteration: int = 0
    loss_history: list[LossRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "params": write_arrays(directory / "params", self.params),
            "optimizer": write_arrays(directory / "optimizer", self.optimizer_state),
            "metadata": self.metadata,
        }
        _write_text(directory / "registry.jsonl", self.registry.to_text())
        _write_text(directory / "loss_history.csv", history_to_csv(self.loss_history))
        _write_text(directory / "manifest.json", _dump_json(manifest))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise LoadError(f"checkpoint manifest not found: {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise LoadError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
        registry = Registry.load(directory / "registry.jsonl").freeze()
        return cls(
            model_config=ModelConfig.from_dict(manifest["model_config"]),
            registry=registry,
            params=read_arrays(directory / "params", manifest["params"]),
            optimizer_state=read_arrays(directory / "optimizer", manifest["optimizer"]),
            train_config=manifest["train_config"],
            epoch=manifest["epoch"],
            iteration=manifest["iteration"],
            loss_history=history_from_csv((directory / "loss_history.csv").read_text(encoding="utf-8")),
            metadata=manifest.get("metadata", {}),
        )

    def build_model(self):
        from .network import build_model

        model = build_model(self.model_config, self.registry)
        load_params(model, self.params)
        return model

    @classmethod
    def from_model(cls, model, **kwargs) -> "Checkpoint":
        params = {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()}
        return cls(model_config=model.config, registry=model.registry, params=params, **kwargs)


def load_params(model: torch.nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise LoadError(f"parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, t in params.items():
        if tuple(own[name].shape) != tuple(t.shape):
            raise LoadError(f"{name}: checkpoint shape {tuple(t.shape)} != model {tuple(own[name].shape)}")
    with torch.no_grad():
        for name, t in params.items():
            own[name].copy_(t.to(own[name].dtype))
