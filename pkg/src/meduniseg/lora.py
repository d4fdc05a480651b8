"""Low-rank adapters and residual heads on top of a frozen universal model.

Adapters and residual heads are gated by task routing: they are active only
for the tasks being re-learned, so every other task keeps the frozen model's
predictions exactly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .backbone import NUM_STAGES, ConvBlock, PseudoConv3d, PseudoConvTranspose3d, init_he
from .checkpoint import (
    Checkpoint,
    LossRecord,
    directory_digest,
    history_from_csv,
    history_to_csv,
    read_arrays,
    tensor_digest,
    write_arrays,
)
from .errors import LoadError, RoutingError
from .network import MedUniSegNet
from .registry import DatasetSpec

EXTENSION_FORMAT = "meduniseg-extension/1"


class LoRAConv3d(nn.Module):
    """base(x) + (alpha / rank) * up(down(x)); ``up`` starts at zero."""

    def __init__(self, base: PseudoConv3d, rank: int = 32, alpha: float = 64.0):
        super().__init__()
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.down = PseudoConv3d(
            base.in_channels, rank, base.kernel_size, stride=base.stride, padding=base.padding, bias=False
        )
        self.up = PseudoConv3d(rank, base.out_channels, 1, bias=False)
        nn.init.zeros_(self.up.weight)
        self.active = True

    def adapter(self, x):
        return self.scale * self.up(self.down(x))

    def forward(self, x):
        y = self.base(x)
        if self.active:
            y = y + self.adapter(x)
        return y


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    alpha: float = 64.0


class ExtendedMedUniSeg(nn.Module):
    def __init__(self, base: MedUniSegNet, tasks: Iterable[int], rank: int = 32, alpha: float = 64.0):
        super().__init__()
        tasks = sorted(set(int(t) for t in tasks))
        if not tasks:
            raise RoutingError("no tasks selected for extension")
        for t in tasks:
            if not 0 <= t < base.registry.num_tasks:
                raise RoutingError(f"task {t} not in registry")
        self.base = base
        self.tasks = tuple(tasks)
        self.lora = LoraConfig(rank, alpha)
        for p in base.parameters():
            p.requires_grad_(False)

        self.adapters: list[LoRAConv3d] = []
        bb = base.backbone
        for stage in list(bb.encoder) + list(bb.decoder):
            for block in stage:
                if isinstance(block, ConvBlock):
                    block.conv = LoRAConv3d(block.conv, rank, alpha)
                    self.adapters.append(block.conv)

        cfg = base.config
        w, strides = cfg.widths, cfg.stage_strides
        self.res_up = nn.ModuleList()
        self.res_heads = nn.ModuleList()
        for i in range(cfg.supervised_scales):
            self.res_up.append(PseudoConvTranspose3d(w[i + 1], w[i], strides[i + 1], stride=strides[i + 1]))
            head = nn.Conv3d(w[i], cfg.max_class_count, 1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.res_heads.append(head)
        self.res_up.apply(init_he)

    @property
    def config(self):
        return self.base.config

    @property
    def registry(self):
        return self.base.registry

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for a in self.adapters:
            params += [a.down.weight, a.up.weight]
        params += list(self.res_up.parameters()) + list(self.res_heads.parameters())
        return params

    def trainable_state(self) -> dict[str, torch.Tensor]:
        ids = {id(p) for p in self.trainable_parameters()}
        return {n: p for n, p in self.named_parameters() if id(p) in ids}

    def frozen_parameters(self) -> dict[str, nn.Parameter]:
        ids = {id(p) for p in self.trainable_parameters()}
        return {n: p for n, p in self.named_parameters() if id(p) not in ids}

    def set_active(self, active: bool) -> None:
        for a in self.adapters:
            a.active = active

    def forward(self, images: torch.Tensor, task_id: int, modal_id: int) -> list[torch.Tensor]:
        active = task_id in self.tasks
        self.set_active(active)
        out = self.base.forward_full(images, task_id, modal_id)
        if not active:
            return out.logits
        pseudo = images.shape[2] == 1
        feats = out.features
        logits = []
        for i, lg in enumerate(out.logits):
            # scale i is decoder stage len-1-i; its residual upsamples the next coarser stage
            src = feats[len(feats) - 2 - i]
            logits.append(lg + self.res_heads[i](self.res_up[i](src, pseudo_3d=pseudo)))
        return logits


def expected_trainable_count(model: MedUniSegNet, rank: int) -> int:
    """Closed-form parameter count for adapters + residual heads."""
    cfg = model.config
    w, strides, k = cfg.widths, cfg.stage_strides, cfg.kernel_size
    convs = []
    convs.append((w[0], w[0]))  # stage 1 second block; stems are not adapted
    for s in range(1, NUM_STAGES):
        convs += [(w[s - 1], w[s]), (w[s], w[s])]
    for s in range(NUM_STAGES - 1):
        convs += [(2 * w[s], w[s]), (w[s], w[s])]
    total = sum(k**3 * cin * rank + rank * cout for cin, cout in convs)
    for i in range(cfg.supervised_scales):
        vol = strides[i + 1][0] * strides[i + 1][1] * strides[i + 1][2]
        total += w[i + 1] * w[i] * vol + w[i]
        total += w[i] * cfg.max_class_count + cfg.max_class_count
    return total


def extend(checkpoint: Checkpoint | MedUniSegNet, tasks_to_relearn: Sequence[int], rank: int = 32, alpha: float = 64.0, seed: int = 0) -> ExtendedMedUniSeg:
    base = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ExtendedMedUniSeg(base, tasks_to_relearn, rank, alpha)


def frozen_digests(model: ExtendedMedUniSeg) -> dict[str, str]:
    return {n: tensor_digest(p) for n, p in model.frozen_parameters().items()}


@dataclass
class ExtensionCheckpoint:
    """Delta checkpoint: base reference + adapter / residual-head arrays."""

    base_path: str
    base_digest: str
    tasks: tuple[int, ...]
    lora: LoraConfig
    params: dict[str, torch.Tensor]
    train_config: dict | None = None
    iteration: int = 0
    loss_history: list[LossRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": EXTENSION_FORMAT,
            "base_path": self.base_path,
            "base_digest": self.base_digest,
            "tasks": list(self.tasks),
            "rank": self.lora.rank,
            "alpha": self.lora.alpha,
            "train_config": self.train_config,
            "iteration": self.iteration,
            "params": write_arrays(directory / "params", self.params),
            "metadata": self.metadata,
        }
        (directory / "loss_history.csv").write_text(history_to_csv(self.loss_history), encoding="utf-8")
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory) -> "ExtensionCheckpoint":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise LoadError(f"extension manifest not found: {path}")
        m = json.loads(path.read_text(encoding="utf-8"))
        if m.get("format") != EXTENSION_FORMAT:
            raise LoadError(f"{path}: unsupported format {m.get('format')!r}")
        return cls(
            base_path=m["base_path"],
            base_digest=m["base_digest"],
            tasks=tuple(m["tasks"]),
            lora=LoraConfig(m["rank"], m["alpha"]),
            params=read_arrays(directory / "params", m["params"]),
            train_config=m["train_config"],
            iteration=m["iteration"],
            loss_history=history_from_csv((directory / "loss_history.csv").read_text(encoding="utf-8")),
            metadata=m.get("metadata", {}),
        )

    def compose(self, base_dir=None) -> ExtendedMedUniSeg:
        base_dir = Path(base_dir or self.base_path)
        digest = directory_digest(base_dir)
        if digest != self.base_digest:
            raise LoadError(f"base checkpoint {base_dir} does not match the recorded digest")
        model = ExtendedMedUniSeg(Checkpoint.load(base_dir).build_model(), self.tasks, self.lora.rank, self.lora.alpha)
        own = model.trainable_state()
        if set(own) != set(self.params):
            raise LoadError("extension parameters do not match the rebuilt model")
        with torch.no_grad():
            for n, t in self.params.items():
                own[n].copy_(t.to(own[n].dtype))
        return model


def train_extension(
    model: ExtendedMedUniSeg,
    datasets_subset: Sequence[DatasetSpec],
    train_config,
    base_path: str = "",
    base_digest: str = "",
    on_step=None,
) -> ExtensionCheckpoint:
    """Update only adapters and residual heads on the re-learned tasks' datasets."""
    from .trainer import train_loop

    if not datasets_subset:
        raise ValueError("datasets_subset must be non-empty")
    for ds in datasets_subset:
        if ds.task.task_id not in model.tasks:
            raise RoutingError(f"dataset task {ds.task.task_id} is not among extended tasks {model.tasks}")
    before = frozen_digests(model)
    frozen = list(model.frozen_parameters().values())
    result = train_loop(model, datasets_subset, train_config, params=model.trainable_parameters(), frozen=frozen, on_step=on_step)
    if frozen_digests(model) != before:
        raise AssertionError("frozen parameters changed during extension training")
    return ExtensionCheckpoint(
        base_path=str(base_path),
        base_digest=base_digest,
        tasks=model.tasks,
        lora=model.lora,
        params={n: p.detach().to(torch.float32).clone() for n, p in model.trainable_state().items()},
        train_config=train_config.to_dict(),
        iteration=result.iterations,
        loss_history=list(result.history),
        metadata={"frozen_sha256": hashlib.sha256(json.dumps(before, sort_keys=True).encode()).hexdigest()},
    )
