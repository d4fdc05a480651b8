"""Central finite differences against autograd on a float64 micro model with adapters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from conftest import micro_config, micro_datasets, micro_registry
from meduniseg.lora import extend
from meduniseg.network import build_model
from meduniseg.objectives import masked_loss

GROUPS = ("modal_prompt", "mmap", "task_prompt", "fuse", "backbone", "lora")


@dataclass
class Probe:
    group: str
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-30)

    def within(self, rtol: float, atol: float = 0.0) -> bool:
        return abs(self.analytic - self.numeric) <= rtol * max(abs(self.analytic), abs(self.numeric)) + atol


def _group(name: str) -> str:
    if "modal_bank.prompts" in name:
        return "modal_prompt"
    if "mmap" in name:
        return "mmap"
    if name == "base.fuse.prompt":
        return "task_prompt"
    if ".fuse." in name:
        return "fuse"
    if ".down." in name or ".up." in name or name.startswith("res_"):
        return "lora"
    return "backbone"


def build_probe_model(negative_slope: float = 0.01):
    """Micro model in float64 with adapters on tasks 0 and 2, all parameters trainable.

    Adapter up-maps and residual heads get random weights so their gradients
    are not trivially zero.
    """
    reg = micro_registry()
    base = build_model(micro_config(negative_slope=negative_slope), reg, seed=0).double()
    ext = extend(base, [0, 2], rank=2, alpha=4.0, seed=1).double()
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for a in ext.adapters:
            a.up.weight.copy_(torch.randn(a.up.weight.shape, generator=g, dtype=torch.float64) * 0.1)
        for h in ext.res_heads:
            h.weight.copy_(torch.randn(h.weight.shape, generator=g, dtype=torch.float64) * 0.1)
    for p in ext.parameters():
        p.requires_grad_(True)
    datasets = micro_datasets(reg)
    batches = []
    for ds in (datasets[0], datasets[2]):  # one 3D batch, one 2D batch
        x = torch.from_numpy(np.stack([s.image for s in ds.train_samples[:2]])).double()
        y = torch.from_numpy(np.stack([s.label for s in ds.train_samples[:2]]).astype(np.int64))
        batches.append((x, y, ds.task.task_id, ds.modality.modal_id, ds.task.class_count))
    return ext, batches


def run_probe(h: float, per_group: int = 40, negative_slope: float = 0.01, seed: int = 0) -> list[Probe]:
    model, batches = build_probe_model(negative_slope)

    def loss():
        total = 0.0
        for x, y, t, m, c in batches:
            total = total + masked_loss(model(x, t, m), y, c).total
        return total

    named = dict(model.named_parameters())
    by_group = {g: [n for n in named if _group(n) == g] for g in GROUPS}
    rng = np.random.default_rng(seed)
    picks = []
    for g in GROUPS:
        names = by_group[g]
        for _ in range(per_group):
            n = names[rng.integers(len(names))]
            picks.append((g, n, int(rng.integers(named[n].numel()))))

    model.zero_grad()
    loss().backward()
    grads = {n: (torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()) for n, p in named.items()}
    out = []
    with torch.no_grad():
        for g, n, i in picks:
            flat = named[n].view(-1)
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss())
            flat[i] = old - h
            down = float(loss())
            flat[i] = old
            out.append(Probe(g, n, i, float(grads[n].view(-1)[i]), (up - down) / (2 * h)))
    return out
