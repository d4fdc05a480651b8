"""INI run configuration with one section per module.

Every key has a typed default; unknown sections or keys are errors. The
resolved configuration (defaults filled in, values normalised) has a
canonical text form, and its sha256 is the config hash recorded in run
manifests.

Sections: ``[run]``, ``[synth]``, ``[model]``, ``[train]``, ``[lora]``,
``[finetune]``, ``[eval]``, ``[export]``, plus optional ``[task:NAME]``
sections that replace the built-in desk benchmark with custom phantoms.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .backbone import VARIANTS, ModelConfig, PromptConfig
from .desk import DESK_STRIDES, desk_model_config, desk_phantoms, desk_registry, desk_train_config, heldout_phantom
from .errors import ConfigurationError
from .registry import Registry
from .synth import SHAPES, PhantomSpec
from .trainer import TrainConfig


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _strides(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_ints(stage) for stage in text.replace(" ", "").split("/") if stage)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return " / ".join(_fmt(v) for v in value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_DESK_MODEL = desk_model_config()
_DESK_TRAIN = desk_train_config()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {"seed": (int, 0)},
    "synth": {
        "benchmark": (str, "desk"),
        "n_train": (int, 24),
        "n_test": (int, 8),
    },
    "model": {
        "variant": (str, _DESK_MODEL.variant),
        "width_scale": (float, _DESK_MODEL.width_scale),
        "stage_widths": (_ints, _DESK_MODEL.stage_widths),
        "stage_strides": (_strides, DESK_STRIDES),
        "kernel_size": (int, _DESK_MODEL.kernel_size),
        "patch_3d": (_ints, _DESK_MODEL.patch_3d),
        "patch_2d": (_ints, _DESK_MODEL.patch_2d),
        "prompt_length": (int, _DESK_MODEL.prompt.prompt_length),
        "task_prompt_channels": (int, _DESK_MODEL.prompt.task_prompt_channels),
        "fuse_blocks": (int, _DESK_MODEL.prompt.fuse_blocks),
        "fuse_reduction": (int, _DESK_MODEL.prompt.fuse_reduction),
    },
    "train": {
        "max_epochs": (int, _DESK_TRAIN.max_epochs),
        "iterations_per_dataset": (int, _DESK_TRAIN.iterations_per_dataset),
        "max_iterations": (_opt_int, _DESK_TRAIN.max_iterations),
        "initial_lr": (float, _DESK_TRAIN.initial_lr),
        "lr_exponent": (float, _DESK_TRAIN.lr_exponent),
        "momentum": (float, _DESK_TRAIN.momentum),
        "nesterov": (_bool, _DESK_TRAIN.nesterov),
        "weight_decay": (float, _DESK_TRAIN.weight_decay),
        "grad_clip": (float, _DESK_TRAIN.grad_clip),
        "batch_size_2d": (int, _DESK_TRAIN.batch_size_2d),
        "batch_size_3d": (int, _DESK_TRAIN.batch_size_3d),
    },
    "lora": {"rank": (int, 32), "alpha": (float, 64.0)},
    "finetune": {"modal_init": (str, "fresh")},
    "eval": {"overlap": (float, 0.5)},
    "export": {"n_per_task": (int, 1000), "split": (str, "test")},
}

TASK_SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "shape": (str, None),
    "modality": (str, None),
    "channels": (int, None),
    "dimensionality": (str, None),
    "classes": (int, None),
    "dims": (_ints, None),
    "channel_means": (_floats, None),
    "channel_stds": (_floats, None),
    "class_offsets": (_floats, None),
    "noise_std": (float, 0.1),
    "radius_range": (_floats, (0.45, 0.7)),
    "inner_ratio": (float, 0.5),
}

BENCHMARKS = ("desk", "desk-heldout", "custom")


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    tasks: dict[str, dict[str, Any]] = field(default_factory=dict)
    source: str | None = None

    # -- accessors -----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def section(self, name: str) -> dict[str, Any]:
        return self.values[name]

    def with_override(self, section: str, key: str, value) -> "RunConfig":
        if key not in SCHEMA.get(section, {}):
            raise ConfigurationError(f"unknown config key [{section}] {key}")
        values = {s: dict(v) for s, v in self.values.items()}
        values[section][key] = value
        return RunConfig(values, {k: dict(v) for k, v in self.tasks.items()}, self.source)

    def to_ini(self) -> str:
        """Canonical text: every section and key, sorted, with normalised values."""
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in sorted(self.values[section].items())]
            lines.append("")
        for name in self.tasks:  # task order defines task ids
            lines.append(f"[task:{name}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in sorted(self.tasks[name].items())]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()

    # -- builders ------------------------------------------------------------

    def model_config(self, max_class_count: int = 2) -> ModelConfig:
        m = self.values["model"]
        if m["variant"] not in VARIANTS:
            raise ConfigurationError(f"unknown variant {m['variant']!r}; expected one of {VARIANTS}")
        cfg = ModelConfig(
            stage_widths=m["stage_widths"],
            width_scale=m["width_scale"],
            stage_strides=m["stage_strides"],
            kernel_size=m["kernel_size"],
            patch_3d=m["patch_3d"],
            patch_2d=m["patch_2d"],
            prompt=PromptConfig(m["prompt_length"], m["task_prompt_channels"], m["fuse_blocks"], m["fuse_reduction"]),
            variant=m["variant"],
            max_class_count=max_class_count,
        )
        return cfg.validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.values["train"])

    def registry_and_phantoms(self) -> tuple[Registry, list[PhantomSpec]]:
        benchmark = self.values["synth"]["benchmark"]
        if benchmark not in BENCHMARKS:
            raise ConfigurationError(f"unknown benchmark {benchmark!r}; expected one of {BENCHMARKS}")
        if self.tasks and benchmark != "custom":
            raise ConfigurationError("[task:...] sections require benchmark = custom")
        if benchmark == "desk":
            reg = desk_registry()
            return reg, desk_phantoms(reg, self.seed)
        if benchmark == "desk-heldout":
            spec = heldout_phantom(self.seed)
            reg = Registry()
            reg.register(spec.modality)
            reg.register(spec.task)
            return reg.freeze(), [spec]
        if not self.tasks:
            raise ConfigurationError("benchmark = custom needs at least one [task:NAME] section")
        reg = Registry()
        specs = []
        for i, (name, t) in enumerate(self.tasks.items()):
            key = (t["modality"], t["channels"], t["dimensionality"])
            modality = next((m for m in reg.modalities if (m.name, m.channel_count, m.dimensionality) == key), None)
            if modality is None:
                modality = reg.add_modality(*key)
            task = reg.add_task(name, t["classes"], modality.modal_id)
            specs.append(
                PhantomSpec(
                    t["shape"], task, modality, t["dims"], t["channel_means"], t["channel_stds"], t["class_offsets"],
                    t["noise_std"], self.seed + 1 + i, radius_range=t["radius_range"], inner_ratio=t["inner_ratio"],
                )
            )
        for s in specs:
            s.validate()
        return reg.freeze(), specs


def default_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def _parse_value(section: str, key: str, raw: str, parser: Callable[[str], Any]):
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from None


def parse_config(text: str, source: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",), default_section="\x00unused")
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    cfg = default_config()
    cfg.source = source
    for section in cp.sections():
        if section.startswith("task:"):
            name = section[len("task:") :].strip()
            if not name:
                raise ConfigurationError("task section needs a name: [task:NAME]")
            entry = {}
            for key, raw in cp.items(section):
                if key not in TASK_SCHEMA:
                    raise ConfigurationError(f"unknown config key [{section}] {key}")
                entry[key] = _parse_value(section, key, raw, TASK_SCHEMA[key][0])
            for key, (_, default) in TASK_SCHEMA.items():
                if key not in entry:
                    if default is None:
                        raise ConfigurationError(f"[{section}] is missing required key {key!r}")
                    entry[key] = default
            if entry["shape"] not in SHAPES:
                raise ConfigurationError(f"[{section}] shape must be one of {SHAPES}")
            cfg.tasks[name] = entry
            continue
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown config key [{section}] {key}")
            cfg.values[section][key] = _parse_value(section, key, raw, SCHEMA[section][key][0])
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return default_config()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
