"""Command line: synth, train, extend, finetune, eval, export-priors.

Each command writes into a fresh ``--out`` directory. Work happens in a
hidden staging directory next to it, which is renamed into place only on
success, so a failed run leaves nothing behind. Every run directory holds a
``run_manifest.json``, the resolved ``config.ini``, and a ``run.log``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, directory_digest, tensor_digest
from .config import RunConfig, load_config
from .errors import ConfigurationError, LoadError, RoutingError, ShapeError, TrainingDivergedError
from .inference import evaluate
from .lora import ExtensionCheckpoint, extend, train_extension
from .registry import DatasetSpec, Registry, RegistryError, Sample
from .synth import PhantomGenerationError, dataset_dirname, generate_dataset, list_dataset_dirs, read_dataset, write_dataset
from .trainer import finetune, substream_seed, train_universal

log = logging.getLogger("meduniseg")

MANIFEST_NAME = "run_manifest.json"
PRIORS_FORMAT = "meduniseg-priors/1"
EXPECTED_ERRORS = (
    ConfigurationError,
    RoutingError,
    ShapeError,
    LoadError,
    TrainingDivergedError,
    RegistryError,
    PhantomGenerationError,
    OSError,
    ValueError,
    LookupError,
)


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    config_hash: str
    content_hash: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, directory: Path) -> None:
        text = json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        (directory / MANIFEST_NAME).write_text(text, encoding="utf-8")

    @classmethod
    def read(cls, directory) -> "RunManifest":
        return cls(**json.loads((Path(directory) / MANIFEST_NAME).read_text(encoding="utf-8")))


def content_hash(command: str, config: RunConfig, inputs: dict[str, str]) -> str:
    payload = json.dumps({"command": command, "config": config.digest(), "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigurationError(f"--{what} is required for this command")
    if not path.exists():
        raise FileNotFoundError(f"{what} path does not exist: {path}")
    return path


@contextmanager
def staged_output(out: Path):
    """Yield a staging directory that becomes ``out`` only if the block succeeds."""
    out = Path(out)
    if out.exists():
        raise FileExistsError(f"output directory already exists: {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = out.parent / f".{out.name}.partial"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    handler = logging.FileHandler(stage / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    try:
        yield stage
    except BaseException:
        log.removeHandler(handler)
        handler.close()
        shutil.rmtree(stage, ignore_errors=True)
        raise
    log.removeHandler(handler)
    handler.close()
    stage.rename(out)


def _outputs(stage: Path) -> list[str]:
    return sorted(str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file())


def _finish(stage: Path, command: str, config: RunConfig, inputs: dict[str, str], started: float, **extra) -> None:
    (stage / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    manifest = RunManifest(
        command=command,
        config_path=config.source,
        seed=config.seed,
        config_hash=config.digest(),
        content_hash=content_hash(command, config, inputs),
        inputs=inputs,
        outputs=_outputs(stage) + [MANIFEST_NAME],
        wall_clock_seconds=round(time.perf_counter() - started, 3),
        extra=extra,
    )
    manifest.write(stage)


# -- data loading ---------------------------------------------------------------


def load_data_dir(data: Path) -> tuple[Registry, list[DatasetSpec]]:
    reg_path = data / "registry.jsonl"
    if not reg_path.exists():
        raise FileNotFoundError(f"registry file not found: {reg_path}")
    registry = Registry.load(reg_path).freeze()
    dirs = list_dataset_dirs(data / "datasets")
    if not dirs:
        raise FileNotFoundError(f"no datasets under {data / 'datasets'}")
    return registry, [read_dataset(d) for d in dirs]


def route_datasets(registry: Registry, datasets: Sequence[DatasetSpec]) -> list[DatasetSpec]:
    """Re-tag datasets with the ids of the same-named tasks in ``registry``."""
    by_name = {t.name: t for t in registry.tasks}
    out = []
    for ds in datasets:
        task = by_name.get(ds.task.name)
        if task is None:
            raise RoutingError(f"dataset task {ds.task.name!r} is not in the checkpoint registry")
        modality = registry.modality(task.modal_id)
        if (modality.channel_count, modality.dimensionality) != (ds.modality.channel_count, ds.modality.dimensionality):
            raise RoutingError(f"dataset {ds.task.name!r} does not match modality {modality.name!r}")

        def retag(samples):
            return [Sample(s.image, s.label, s.index, task.task_id, modality.modal_id) for s in samples]

        out.append(DatasetSpec(task, modality, retag(ds.train_samples), retag(ds.test_samples), seed=ds.seed))
    return out


# -- commands -------------------------------------------------------------------


def cmd_synth(args, config: RunConfig) -> None:
    started = time.perf_counter()
    registry, phantoms = config.registry_and_phantoms()
    s = config.section("synth")
    with staged_output(args.out) as stage:
        for spec in phantoms:
            ds = generate_dataset(spec, s["n_train"], s["n_test"])
            write_dataset(ds, stage / "datasets" / dataset_dirname(spec.task), phantom=spec)
            log.info("wrote %s: %d train / %d test", spec.task.name, len(ds.train_samples), len(ds.test_samples))
        registry.save(stage / "registry.jsonl")
        _finish(stage, "synth", config, {}, started)


def cmd_train(args, config: RunConfig) -> None:
    started = time.perf_counter()
    data = _require(args.data, "data")
    registry, datasets = load_data_dir(data)
    datasets = route_datasets(registry, datasets)
    model_cfg = config.model_config(registry.max_class_count)
    train_cfg = config.train_config()
    inputs = {"data": directory_digest(data)}
    with staged_output(args.out) as stage:
        log.info("training %s on %d datasets for %d iterations", model_cfg.variant, len(datasets), train_cfg.total_iterations(len(datasets)))
        ckpt = train_universal(model_cfg, train_cfg, registry, datasets)
        ckpt.save(stage / "checkpoint")
        shutil.copyfile(stage / "checkpoint" / "loss_history.csv", stage / "loss_history.csv")
        registry.save(stage / "registry.jsonl")
        losses = [r.loss for r in ckpt.loss_history]
        _finish(stage, "train", config, inputs, started, final_loss=losses[-1] if losses else None, iterations=len(losses))


def _parse_tasks(text: str | None) -> list[int]:
    if not text:
        raise ConfigurationError("--tasks is required for extend (e.g. --tasks 0,2)")
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"--tasks expects comma-separated integers, got {text!r}") from None


def cmd_extend(args, config: RunConfig) -> None:
    started = time.perf_counter()
    ckpt_dir = _require(args.checkpoint, "checkpoint")
    data = _require(args.data, "data")
    tasks = _parse_tasks(args.tasks)
    base = Checkpoint.load(ckpt_dir)
    _, datasets = load_data_dir(data)
    datasets = route_datasets(base.registry, datasets)
    subset = [ds for ds in datasets if ds.task.task_id in tasks]
    if not subset:
        raise ConfigurationError(f"no datasets found for tasks {tasks}")
    lcfg = config.section("lora")
    base_digest = directory_digest(ckpt_dir)
    inputs = {"checkpoint": base_digest, "data": directory_digest(data)}
    with staged_output(args.out) as stage:
        model = extend(base, tasks, lcfg["rank"], lcfg["alpha"], seed=substream_seed(config.seed, "extend-init"))
        reference = base.build_model().eval()
        probe = _probe_input(model.registry, subset[0], config.seed)
        with torch.no_grad():
            diffs = [float((a - b).abs().max()) for a, b in zip(reference(*probe), model.eval()(*probe))]
        log.info("identity at init: max-abs difference %.3g", max(diffs))
        delta = train_extension(model, subset, config.train_config(), str(Path(ckpt_dir).resolve()), base_digest)
        delta.save(stage / "extension")
        shutil.copyfile(stage / "extension" / "loss_history.csv", stage / "loss_history.csv")
        log.info("frozen parameters unchanged: %s", delta.metadata["frozen_sha256"])
        _finish(stage, "extend", config, inputs, started, identity_max_abs=max(diffs), tasks=tasks)


def _probe_input(registry: Registry, ds: DatasetSpec, seed: int):
    s = ds.test_samples[0] if ds.test_samples else ds.train_samples[0]
    g = torch.Generator().manual_seed(substream_seed(seed, "probe"))
    x = torch.randn((1, *s.image.shape), generator=g)
    return x, ds.task.task_id, ds.modality.modal_id


def cmd_finetune(args, config: RunConfig) -> None:
    started = time.perf_counter()
    ckpt_dir = _require(args.checkpoint, "checkpoint")
    data = _require(args.data, "data")
    _, datasets = load_data_dir(data)
    if args.task is not None:
        datasets = [ds for ds in datasets if ds.task.name == args.task]
        if not datasets:
            raise ConfigurationError(f"no dataset named {args.task!r} under {data}")
    if len(datasets) != 1:
        raise ConfigurationError(f"finetune needs exactly one dataset, found {len(datasets)} (use --task NAME)")
    upstream = Checkpoint.load(ckpt_dir)
    inputs = {"checkpoint": directory_digest(ckpt_dir), "data": directory_digest(data)}
    with staged_output(args.out) as stage:
        ckpt, setup = finetune(
            upstream,
            datasets[0],
            config.train_config(),
            model_config=config.model_config(upstream.model_config.max_class_count),
            modal_init=config.section("finetune")["modal_init"],
        )
        for name, digest in sorted(setup.frozen_digests.items()):
            after = tensor_digest(dict(setup.model.named_parameters())[name])
            log.info("frozen %s sha256 before %s after %s", name, digest, after)
        if setup.new_modality:
            log.info("modality %r is new upstream; its prompt is trained", setup.dataset.modality.name)
        ckpt.save(stage / "checkpoint")
        shutil.copyfile(stage / "checkpoint" / "loss_history.csv", stage / "loss_history.csv")
        ckpt.registry.save(stage / "registry.jsonl")
        _finish(stage, "finetune", config, inputs, started, frozen_sha256=setup.frozen_digests, task_id=setup.dataset.task.task_id)


def _load_model(args):
    ckpt_dir = _require(args.checkpoint, "checkpoint")
    inputs = {"checkpoint": directory_digest(ckpt_dir)}
    if getattr(args, "extension", None) is not None:
        ext_dir = _require(args.extension, "extension")
        inputs["extension"] = directory_digest(ext_dir)
        model = ExtensionCheckpoint.load(ext_dir).compose(ckpt_dir)
    else:
        model = Checkpoint.load(ckpt_dir).build_model()
    return model.eval(), inputs


def cmd_eval(args, config: RunConfig) -> None:
    started = time.perf_counter()
    data = _require(args.data, "data")
    model, inputs = _load_model(args)
    _, datasets = load_data_dir(data)
    datasets = route_datasets(model.registry, datasets)
    inputs["data"] = directory_digest(data)
    with staged_output(args.out) as stage:
        report = evaluate(model, datasets, wrong_task_id=args.wrong_task_id, overlap=config.section("eval")["overlap"])
        method = model.config.variant + (" (wrong task id)" if args.wrong_task_id else "")
        (stage / "metrics.csv").write_text(report.to_csv(method), encoding="utf-8")
        summary = {
            "per_dataset": report.per_dataset,
            "per_class": report.per_class,
            "mean_3d": report.mean_3d,
            "mean_2d": report.mean_2d,
            "mean": report.mean,
            "omitted_groups": report.omitted_groups,
            "wrong_task_id": bool(args.wrong_task_id),
        }
        (stage / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.info("mean Dice %.2f", report.mean)
        _finish(stage, "eval", config, inputs, started, mean=report.mean)


def _fit(image: np.ndarray, patch) -> np.ndarray:
    """Centre-crop / edge-pad a [C, D, H, W] image to ``patch``."""
    out = image
    for axis, p in enumerate(patch, start=1):
        n = out.shape[axis]
        if n > p:
            lo = (n - p) // 2
            out = np.take(out, range(lo, lo + p), axis=axis)
        elif n < p:
            pad = [(0, 0)] * out.ndim
            pad[axis] = ((p - n) // 2, p - n - (p - n) // 2)
            out = np.pad(out, pad, mode="edge")
    return out


def choose_samples(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Without replacement if there are enough samples, with replacement otherwise."""
    if n < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n}")
    if count < 1:
        raise ValueError("task has no samples to export")
    return rng.choice(count, size=n, replace=count < n)


def write_priors(directory: Path, rows: np.ndarray, task_ids: Sequence[int], sample_indices: Sequence[int], prior_dims) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(rows, dtype="<f4").tofile(directory / "priors.f32")
    manifest = {
        "format": PRIORS_FORMAT,
        "rows": int(rows.shape[0]),
        "prior_dims": list(prior_dims),
        "task_ids": [int(t) for t in task_ids],
        "sample_indices": [int(i) for i in sample_indices],
    }
    (directory / "priors_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_priors(directory) -> tuple[np.ndarray, list[int], list[int], tuple[int, ...]]:
    directory = Path(directory)
    m = json.loads((directory / "priors_manifest.json").read_text(encoding="utf-8"))
    if m.get("format") != PRIORS_FORMAT:
        raise LoadError(f"unsupported priors format {m.get('format')!r}")
    dims = tuple(m["prior_dims"])
    rows = np.fromfile(directory / "priors.f32", dtype="<f4").reshape(m["rows"], int(np.prod(dims)))
    return rows, m["task_ids"], m["sample_indices"], dims


def cmd_export_priors(args, config: RunConfig) -> None:
    started = time.perf_counter()
    data = _require(args.data, "data")
    n = args.n_per_task if args.n_per_task is not None else config.section("export")["n_per_task"]
    if n < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n}")
    model, inputs = _load_model(args)
    if not hasattr(model, "task_prior"):
        raise ConfigurationError("prior export needs a universal checkpoint, not an extension")
    _, datasets = load_data_dir(data)
    datasets = route_datasets(model.registry, datasets)
    inputs["data"] = directory_digest(data)
    split = config.section("export")["split"]
    if split not in ("train", "test", "all"):
        raise ConfigurationError(f"[export] split must be train, test or all, got {split!r}")
    rng = np.random.default_rng(substream_seed(config.seed, "export"))
    rows, task_ids, sample_ids = [], [], []
    cfg = model.config
    with staged_output(args.out) as stage:
        for ds in datasets:
            samples = {"train": ds.train_samples, "test": ds.test_samples, "all": ds.train_samples + ds.test_samples}[split]
            patch = (1, *cfg.patch_2d) if ds.modality.is_2d else cfg.patch_3d
            for i in choose_samples(len(samples), n, rng):
                s = samples[int(i)]
                x = torch.from_numpy(_fit(s.image, patch)[None].copy())
                prior = model.task_prior(x, ds.task.task_id, ds.modality.modal_id)
                rows.append(prior.reshape(-1).numpy())
                task_ids.append(ds.task.task_id)
                sample_ids.append(s.index)
            log.info("exported %d priors for task %d (%s) from %d samples", n, ds.task.task_id, ds.task.name, len(samples))
        write_priors(stage, np.stack(rows), task_ids, sample_ids, cfg.prompt_dims)
        _finish(stage, "export-priors", config, inputs, started, rows=len(rows))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extend": cmd_extend,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "export-priors": cmd_export_priors,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meduniseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", type=Path, required=True, help="output directory (must not exist)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--data", type=Path, help="directory written by `synth`")
        if name in ("train", "finetune"):
            p.add_argument("--variant", help="override [model] variant")
        if name in ("extend", "finetune", "eval", "export-priors"):
            p.add_argument("--checkpoint", type=Path, help="checkpoint directory")
        if name == "extend":
            p.add_argument("--tasks", help="comma-separated task ids to re-learn")
        if name == "finetune":
            p.add_argument("--task", help="dataset name when --data holds several")
        if name in ("eval", "export-priors"):
            p.add_argument("--extension", type=Path, help="extension (delta) checkpoint on top of --checkpoint")
        if name == "eval":
            p.add_argument("--wrong-task-id", action="store_true", help="route every dataset to the next task id")
        if name == "export-priors":
            p.add_argument("--n-per-task", type=int, help="override [export] n_per_task")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "n_per_task", None) is not None and args.n_per_task < 1:
        parser.error("--n-per-task must be >= 1")
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(console)
    saved = log.level, log.propagate
    log.setLevel(logging.INFO)  # run.log always gets INFO
    log.propagate = False
    try:
        return _run(args)
    finally:
        log.removeHandler(console)
        log.setLevel(saved[0])
        log.propagate = saved[1]


def _run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_override("run", "seed", args.seed)
        if getattr(args, "variant", None):
            config = config.with_override("model", "variant", args.variant)
        COMMANDS[args.command](args, config)
    except EXPECTED_ERRORS as exc:
        print(f"meduniseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
