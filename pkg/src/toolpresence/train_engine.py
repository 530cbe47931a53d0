"""Losses, the step-decay learning-rate schedule and the fine-tuning loop.

Two parameter groups are trained at different rates: the backbone starts at
``base_lr`` and the freshly initialised heads (``fc_tool``, ``fc_phase``) at
``head_lr``; both are multiplied by ``decay_factor`` every ``decay_every``
iterations.  Updates use Caffe-style momentum SGD::

    v <- momentum * v + lr * (grad + weight_decay * w)
    w <- w - v
"""

from __future__ import annotations

import copy
import json
import math
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from toolpresence.data_ingest import DatasetManifest
from toolpresence.errors import ConfigurationError, ShapeError, TrainingDivergedError
from toolpresence.network import ToolPresenceNet, layer_groups, preprocess, save_checkpoint

PRESET_NAMES = ("ToolNet-m2cai16", "ToolNet-Cholec80", "EndoNet-Cholec80")
GROUPS = ("backbone", "new_heads")
LOG_HEADER = "iter\tlr_backbone\tlr_heads\tloss_tool\tloss_phase\tloss_total"


@dataclass
class TrainingConfig:
    total_iterations: int = 50000
    batch_size: int = 50
    base_lr: float = 1e-3
    head_lr: float = 1e-2
    decay_factor: float = 0.1
    decay_every: int = 20000
    tool_loss_weight: float = 1.0
    phase_loss_weight: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hflip: bool = False
    checkpoint_every: int = 10000
    seed: int = 0
    preset: Optional[str] = None

    def __post_init__(self):
        for name in ("total_iterations", "batch_size", "decay_every", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        for name in ("base_lr", "head_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 < self.decay_factor < 1:
            raise ConfigurationError("decay_factor must lie in (0, 1)")
        if self.tool_loss_weight < 0 or self.phase_loss_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.preset is not None and self.preset not in PRESET_NAMES:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {PRESET_NAMES}")

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


# -- losses -----------------------------------------------------------------


def _as_float_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def tool_loss(tool_logits, labels) -> torch.Tensor:
    """Mean per-tool logistic cross-entropy over all N x 7 entries."""
    x = _as_float_tensor(tool_logits)
    y = torch.as_tensor(labels if isinstance(labels, torch.Tensor) else np.asarray(labels))
    if tuple(x.shape) != tuple(y.shape):
        raise ShapeError(f"logits {tuple(x.shape)} vs labels {tuple(y.shape)}")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("tool labels must be 0 or 1")
    y = y.to(x.dtype)
    # softplus form: max(x,0) - x*y + log(1 + exp(-|x|))
    return torch.mean(F.relu(x) - x * y + torch.log1p(torch.exp(-x.abs())))


def phase_loss(phase_logits, labels) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    z = _as_float_tensor(phase_logits)
    y = torch.as_tensor(labels if isinstance(labels, torch.Tensor) else np.asarray(labels)).long()
    if z.dim() != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"phase logits {tuple(z.shape)} vs labels {tuple(y.shape)}")
    if bool(((y < 0) | (y >= z.shape[1])).any()):
        raise ValueError(f"phase labels must lie in 0..{z.shape[1] - 1}")
    picked = z.gather(1, y[:, None])[:, 0]
    return torch.mean(torch.logsumexp(z, dim=1) - picked)


def joint_loss(tool, phase, config: TrainingConfig):
    """Weighted sum; ``phase=None`` (ToolNet) drops the phase term entirely."""
    if config.tool_loss_weight < 0 or config.phase_loss_weight < 0:
        raise ConfigurationError("loss weights must be non-negative")
    total = config.tool_loss_weight * tool
    if phase is not None:
        total = total + config.phase_loss_weight * phase
    return total


# -- schedule & optimizer ---------------------------------------------------


def lr_at(iteration: int, group: str, config: TrainingConfig) -> float:
    if group == "backbone":
        base = config.base_lr
    elif group == "new_heads":
        base = config.head_lr
    else:
        raise KeyError(f"unknown parameter group {group!r}")
    return base * config.decay_factor ** (iteration // config.decay_every)


@torch.no_grad()
def sgd_step(params, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    """One Caffe-style momentum step; weight decay skips 1-d (bias) tensors."""
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay and p.dim() > 1:
            g = g + weight_decay * p
        v.mul_(momentum).add_(g, alpha=lr)
        p.sub_(v)


# -- logging ----------------------------------------------------------------


@dataclass
class LogEntry:
    iteration: int
    lr_backbone: float
    lr_heads: float
    loss_tool: float
    loss_phase: float
    loss_total: float

    def to_line(self) -> str:
        vals = (self.lr_backbone, self.lr_heads, self.loss_tool, self.loss_phase, self.loss_total)
        return "\t".join([str(self.iteration)] + [repr(float(v)) for v in vals])


@dataclass
class TrainingLog:
    entries: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def to_tsv(self) -> str:
        return "\n".join([LOG_HEADER] + [e.to_line() for e in self.entries]) + "\n"

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_tsv().encode("utf-8"))

    @classmethod
    def from_tsv(cls, text: str) -> "TrainingLog":
        lines = text.rstrip("\n").split("\n")
        if lines[0] != LOG_HEADER:
            raise ValueError("not a training log")
        entries = []
        for line in lines[1:]:
            c = line.split("\t")
            entries.append(LogEntry(int(c[0]), *map(float, c[1:])))
        return cls(entries)

    def summary(self) -> dict:
        if not self.entries:
            return {}
        total = np.array([e.loss_total for e in self.entries])
        tail = total[-max(1, len(total) // 10):]
        return {
            "iterations": len(self.entries),
            "first_loss": float(total[0]),
            "final_loss": float(total[-1]),
            "min_loss": float(total.min()),
            "tail_mean_loss": float(tail.mean()),
        }


# -- training ---------------------------------------------------------------


def _model_inputs(model: ToolPresenceNet, images) -> torch.Tensor:
    """uint8 (N,H,W,C) frames get preprocessed; float (N,C,H,W) pass through."""
    if isinstance(images, torch.Tensor):
        x = images
    else:
        arr = np.asarray(images)
        if arr.dtype == np.uint8:
            x = preprocess(arr, model.spec)
        else:
            x = torch.as_tensor(arr)
    return x.to(next(model.parameters()).dtype)


def _labels(model: ToolPresenceNet, manifest: DatasetManifest):
    tool_y = torch.from_numpy(manifest.tool_matrix().astype(np.float32))
    phase_y = None
    if model.spec.variant == "EndoNet":
        if not manifest.has_phases:
            missing = sum(r.phase is None for r in manifest.records)
            raise ConfigurationError(
                f"EndoNet training needs a phase label on every record; {missing} records have none"
            )
        phase_y = torch.from_numpy(manifest.phase_vector())
        if int(phase_y.max()) >= model.spec.phase_count:
            raise ConfigurationError(
                f"phase label {int(phase_y.max())} exceeds model phase_count={model.spec.phase_count}"
            )
    return tool_y, phase_y


def batch_losses(model, x, tool_y, phase_y, config: TrainingConfig):
    """Forward a batch and return ``(loss_tool, loss_phase or None, loss_total)``."""
    out = model(x)
    lt = tool_loss(out.tool_logits, tool_y)
    lp = phase_loss(out.phase_logits, phase_y) if out.phase_logits is not None else None
    return lt, lp, joint_loss(lt, lp, config)


def run_metadata(model: ToolPresenceNet, config: TrainingConfig, log: TrainingLog) -> dict:
    from toolpresence import __version__

    return {
        "training_config": asdict(config),
        "model_spec": model.spec.to_dict(),
        "seed": config.seed,
        "preset": config.preset,
        "loss_summary": log.summary(),
        "optimizer": {"kind": "sgd", "momentum": config.momentum, "weight_decay": config.weight_decay},
        "versions": {
            "toolpresence": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }


def train(
    model: ToolPresenceNet,
    manifest: DatasetManifest,
    config: TrainingConfig,
    images,
    out_dir=None,
    snapshot_fn: Optional[Callable] = None,
    snapshot_every: Optional[int] = None,
):
    """Fine-tune a copy of ``model`` for ``config.total_iterations`` steps.

    ``images`` is aligned with ``manifest.records``.  Batches are drawn
    uniformly with replacement from a generator seeded by ``config.seed``.
    With ``out_dir`` set, periodic checkpoints, ``model.tpw``,
    ``train_log.tsv`` and ``run_meta.json`` are written there.

    Returns ``(trained_model, TrainingLog)``.
    """
    if len(manifest) == 0:
        raise ConfigurationError("cannot train on an empty manifest")
    tool_y, phase_y = _labels(model, manifest)

    model = copy.deepcopy(model)
    x_all = _model_inputs(model, images)
    if x_all.shape[0] != len(manifest):
        raise ShapeError(f"{x_all.shape[0]} images for {len(manifest)} records")

    groups = layer_groups(model)
    named = dict(model.named_parameters())
    params = {g: [named[n] for n in groups[g]] for g in GROUPS}
    velocity = {g: [torch.zeros_like(p) for p in params[g]] for g in GROUPS}

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    n = len(manifest)
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for it in range(config.total_iterations):
            idx = torch.from_numpy(rng.integers(0, n, size=config.batch_size))
            x = x_all[idx]
            if config.hflip:
                mask = torch.from_numpy(rng.random(config.batch_size) < 0.5)
                x = torch.where(mask[:, None, None, None], x.flip(-1), x)
            lt, lp, total = batch_losses(
                model, x, tool_y[idx], None if phase_y is None else phase_y[idx], config
            )
            lrs = {g: lr_at(it, g, config) for g in GROUPS}
            if not math.isfinite(float(total.detach())):
                raise TrainingDivergedError(
                    f"non-finite loss {float(total.detach())} at iteration {it} "
                    f"(lr_backbone={lrs['backbone']:g}, lr_heads={lrs['new_heads']:g})"
                )
            model.zero_grad(set_to_none=False)
            total.backward()
            for g in GROUPS:
                sgd_step(params[g], velocity[g], lrs[g], config.momentum, config.weight_decay)

            log.entries.append(LogEntry(
                it, lrs["backbone"], lrs["new_heads"], float(lt.detach()),
                0.0 if lp is None else float(lp.detach()), float(total.detach()),
            ))
            done = it + 1
            if snapshot_fn is not None and snapshot_every and done % snapshot_every == 0:
                model.eval()
                log.snapshots.append({"iteration": done, **snapshot_fn(model)})
                model.train()
            if out_dir is not None and done % config.checkpoint_every == 0 and done < config.total_iterations:
                save_checkpoint(out_dir / f"checkpoint_{done:06d}.tpw", model, {"iteration": done})
    model.eval()

    if out_dir is not None:
        save_checkpoint(out_dir / "model.tpw", model, {"iteration": config.total_iterations})
        log.write(out_dir / "train_log.tsv")
        meta = run_metadata(model, config, log)
        (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return model, log


# -- gradient checking ------------------------------------------------------


def compute_gradients(model, images, tool_labels, phase_labels=None, config=None) -> dict:
    config = config or TrainingConfig()
    model.zero_grad(set_to_none=True)
    x = _model_inputs(model, images)
    _, _, total = batch_losses(model, x, torch.as_tensor(np.asarray(tool_labels)),
                               None if phase_labels is None else torch.as_tensor(np.asarray(phase_labels)),
                               config)
    total.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    model.zero_grad(set_to_none=True)
    return grads


def grad_check(model, images, tool_labels, phase_labels=None, config=None, h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``model`` in eval mode and perturbs every
    parameter entry, so only use it on tiny models.
    """
    config = config or TrainingConfig()
    model = copy.deepcopy(model).double().eval()
    x = _model_inputs(model, images)
    ty = torch.as_tensor(np.asarray(tool_labels))
    py = None if phase_labels is None else torch.as_tensor(np.asarray(phase_labels))
    analytic = compute_gradients(model, x, ty, py, config)

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            ga = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                plus = float(batch_losses(model, x, ty, py, config)[2])
                flat[i] = orig - h
                minus = float(batch_losses(model, x, ty, py, config)[2])
                flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                a = float(ga[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
