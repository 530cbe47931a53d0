"""Shared convolutional backbone with ToolNet and EndoNet heads.

The backbone follows the AlexNet layout (five conv layers, two fully
connected layers, 4096-wide features) by default; :func:`reduced_backbone`
builds a narrow variant that trains on CPU in seconds.  Both variants attach
``fc_tool`` (features -> 7 tool logits).  EndoNet adds ``fc_phase``, fed by
the features concatenated with the tool output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from toolpresence.data_ingest import NUM_TOOLS
from toolpresence.errors import ConfigurationError, ShapeError, WeightsLoadError

VARIANTS = ("ToolNet", "EndoNet")
PHASE_INPUTS = ("confidences", "logits")
HEAD_INIT_STD = 0.01
DEFAULT_PHASE_COUNT = 8


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    lrn: bool = False
    pool: bool = False  # 3x3 stride-2 max pool after the activation


@dataclass(frozen=True)
class BackboneSpec:
    convs: tuple = ()
    fc_dims: tuple = ()
    dropout: float = 0.0
    global_pool: Optional[str] = None  # None (flatten), "max" or "avg"

    def __post_init__(self):
        object.__setattr__(
            self, "convs", tuple(c if isinstance(c, ConvLayer) else ConvLayer(**c) for c in self.convs)
        )
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if self.global_pool not in (None, "max", "avg"):
            raise ConfigurationError(f"unknown global_pool {self.global_pool!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


def alexnet_backbone() -> BackboneSpec:
    """The Caffe AlexNet layout (grouped conv2/4/5, LRN after conv1/2)."""
    return BackboneSpec(
        convs=(
            ConvLayer(96, 11, stride=4, lrn=True, pool=True),
            ConvLayer(256, 5, padding=2, groups=2, lrn=True, pool=True),
            ConvLayer(384, 3, padding=1),
            ConvLayer(384, 3, padding=1, groups=2),
            ConvLayer(256, 3, padding=1, groups=2, pool=True),
        ),
        fc_dims=(4096, 4096),
        dropout=0.5,
    )


def reduced_backbone(width: int = 16, feature_dim: int = 64) -> BackboneSpec:
    return BackboneSpec(
        convs=(
            ConvLayer(width, 3, padding=1, pool=True),
            ConvLayer(2 * width, 3, padding=1),
        ),
        fc_dims=(feature_dim, feature_dim),
        dropout=0.0,
        global_pool="max",
    )


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "ToolNet"
    input_shape: tuple = (3, 227, 227)
    backbone: BackboneSpec = field(default_factory=alexnet_backbone)
    phase_count: Optional[int] = None
    tool_count: int = NUM_TOOLS
    phase_input: str = "confidences"
    pixel_mean: tuple = (0.5, 0.5, 0.5)
    pixel_scale: float = 1.0 / 255.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "pixel_mean", tuple(float(m) for m in self.pixel_mean))
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneSpec(**self.backbone))
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.tool_count != NUM_TOOLS:
            raise ConfigurationError(f"tool_count is fixed at {NUM_TOOLS}")
        if self.variant == "EndoNet":
            if self.phase_count is None or self.phase_count < 2:
                raise ConfigurationError("EndoNet requires phase_count >= 2")
        elif self.phase_count is not None:
            raise ConfigurationError("ToolNet takes no phase_count")
        if self.phase_input not in PHASE_INPUTS:
            raise ConfigurationError(f"phase_input must be one of {PHASE_INPUTS}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"bad input_shape {self.input_shape}")
        if len(self.pixel_mean) != self.input_shape[0]:
            raise ConfigurationError("pixel_mean needs one entry per input channel")

    @property
    def feature_dim(self) -> int:
        if self.backbone.fc_dims:
            return self.backbone.fc_dims[-1]
        return _conv_output_size(self.backbone, self.input_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["pixel_mean"] = list(self.pixel_mean)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        bb = dict(d.pop("backbone"))
        bb["convs"] = tuple(ConvLayer(**c) for c in bb.get("convs", ()))
        bb["fc_dims"] = tuple(bb.get("fc_dims", ()))
        return cls(backbone=BackboneSpec(**bb), **d)


def _conv_stack_shape(bspec: BackboneSpec, input_shape) -> tuple:
    c, h, w = input_shape
    for layer in bspec.convs:
        h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if layer.pool:
            h = (h - 3) // 2 + 1
            w = (w - 3) // 2 + 1
        c = layer.out_channels
        if h < 1 or w < 1:
            raise ConfigurationError(f"input {input_shape} too small for the conv stack")
    return c, h, w


def _conv_output_size(bspec: BackboneSpec, input_shape) -> int:
    c, h, w = _conv_stack_shape(bspec, input_shape)
    return c if bspec.global_pool else c * h * w


class Backbone(nn.Module):
    def __init__(self, bspec: BackboneSpec, input_shape):
        super().__init__()
        self.bspec = bspec
        in_ch = input_shape[0]
        self.conv_names = []
        for i, layer in enumerate(bspec.convs, start=1):
            if in_ch % layer.groups or layer.out_channels % layer.groups:
                raise ConfigurationError(f"conv{i}: channels not divisible by groups={layer.groups}")
            name = f"conv{i}"
            self.add_module(
                name,
                nn.Conv2d(in_ch, layer.out_channels, layer.kernel, layer.stride, layer.padding,
                          groups=layer.groups),
            )
            self.conv_names.append(name)
            in_ch = layer.out_channels
        width = _conv_output_size(bspec, input_shape)
        self.fc_names = []
        for j, dim in enumerate(bspec.fc_dims, start=len(bspec.convs) + 1):
            name = f"fc{j}"
            self.add_module(name, nn.Linear(width, dim))
            self.fc_names.append(name)
            width = dim
        self.out_dim = width

    def forward(self, x):
        for name, layer in zip(self.conv_names, self.bspec.convs):
            x = F.relu(getattr(self, name)(x))
            if layer.lrn:
                # Caffe LRN: size 5, alpha 1e-4, beta 0.75, k 1
                x = F.local_response_norm(x, 5, alpha=1e-4, beta=0.75, k=1.0)
            if layer.pool:
                x = F.max_pool2d(x, 3, 2)
        if self.bspec.global_pool == "max":
            x = torch.amax(x, dim=(2, 3))
        elif self.bspec.global_pool == "avg":
            x = torch.mean(x, dim=(2, 3))
        else:
            x = torch.flatten(x, 1)
        for name in self.fc_names:
            x = F.relu(getattr(self, name)(x))
            if self.bspec.dropout > 0:
                x = F.dropout(x, self.bspec.dropout, self.training)
        return x


@dataclass
class ForwardOutput:
    features: torch.Tensor
    tool_logits: torch.Tensor
    tool_confidences: torch.Tensor
    phase_logits: Optional[torch.Tensor] = None


class ToolPresenceNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.backbone = Backbone(spec.backbone, spec.input_shape)
        self.fc_tool = nn.Linear(self.backbone.out_dim, spec.tool_count)
        if spec.variant == "EndoNet":
            self.fc_phase = nn.Linear(self.backbone.out_dim + spec.tool_count, spec.phase_count)
        else:
            self.fc_phase = None

    def forward(self, x) -> ForwardOutput:
        expected = tuple(self.spec.input_shape)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected batch of shape (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        features = self.backbone(x)
        tool_logits = self.fc_tool(features)
        conf = torch.sigmoid(tool_logits)
        phase_logits = None
        if self.fc_phase is not None:
            tool_out = conf if self.spec.phase_input == "confidences" else tool_logits
            phase_logits = self.fc_phase(torch.cat([features, tool_out], dim=1))
        return ForwardOutput(features, tool_logits, conf, phase_logits)


def forward(model: ToolPresenceNet, batch) -> ForwardOutput:
    """Run the model on a float batch ``(N, C, H, W)`` (array or tensor)."""
    if not isinstance(batch, torch.Tensor):
        batch = torch.as_tensor(np.asarray(batch))
    dtype = next(model.parameters()).dtype
    return model(batch.to(dtype))


def preprocess(images, spec: ModelSpec) -> torch.Tensor:
    """uint8 ``(N, H, W, C)`` frames -> float32 ``(N, C, H, W)``, scaled and mean-subtracted."""
    arr = np.asarray(images, dtype=np.float32) * np.float32(spec.pixel_scale)
    arr = arr - np.asarray(spec.pixel_mean, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def head_names(spec: ModelSpec) -> tuple:
    return ("fc_tool", "fc_phase") if spec.variant == "EndoNet" else ("fc_tool",)


def layer_groups(model: ToolPresenceNet) -> dict:
    """Split parameter names into ``backbone`` and ``new_heads``."""
    heads = head_names(model.spec)
    groups = {"backbone": [], "new_heads": []}
    for name, _ in model.named_parameters():
        group = "new_heads" if name.split(".")[0] in heads else "backbone"
        groups[group].append(name)
    return groups


def init_model(spec: ModelSpec, pretrained_backbone=None, seed: int = 0) -> ToolPresenceNet:
    """Build a model; the backbone comes from ``pretrained_backbone`` when given.

    Random layers use He-normal weights (backbone) or N(0, 0.01) (heads),
    all biases zero, drawn from a generator seeded with ``seed``.
    """
    model = ToolPresenceNet(spec)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.backbone.children():
            nn.init.kaiming_normal_(module.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(module.bias)
        for name in head_names(spec):
            head = getattr(model, name)
            nn.init.normal_(head.weight, 0.0, HEAD_INIT_STD, generator=gen)
            nn.init.zeros_(head.bias)
    if pretrained_backbone is not None:
        load_backbone(model, pretrained_backbone)
    return model


# -- weights files -----------------------------------------------------------
#
# Layout: the line "TPW 1\n", one line of UTF-8 JSON {"metadata", "tensors"},
# then the raw little-endian float32 buffers back to back. Each tensor entry
# holds name, shape, dtype ("<f4"), offset (from the start of the buffers)
# and nbytes.

MAGIC = b"TPW 1\n"


def save_weights(path, tensors: dict, metadata: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        buf = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(value)), "dtype": "<f4",
                        "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps({"metadata": metadata or {}, "tensors": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for buf in blobs:
            fh.write(buf)


def load_weights(path):
    """Return ``(tensors, metadata)`` with tensors as float32 numpy arrays."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise WeightsLoadError(f"{path}: not a weights file (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end].decode("utf-8"))
    body = memoryview(data)[end + 1:]
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] != "<f4":
            raise WeightsLoadError(f"{path}: {e['name']} has unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(body):
            raise WeightsLoadError(f"{path}: {e['name']} buffer size does not match its shape")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, header["metadata"]


def _assign(params: dict, tensors: dict, what: str) -> None:
    mismatched = []
    for name, p in params.items():
        if name not in tensors:
            mismatched.append(f"{name} (missing)")
        elif tuple(tensors[name].shape) != tuple(p.shape):
            mismatched.append(f"{name} (file {tuple(tensors[name].shape)}, model {tuple(p.shape)})")
    for name in tensors:
        if name not in params:
            mismatched.append(f"{name} (unexpected)")
    if mismatched:
        raise WeightsLoadError(f"{what}: mismatched layers: {', '.join(mismatched)}", mismatched)
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(tensors[name]))


def load_backbone(model: ToolPresenceNet, path) -> None:
    """Load backbone weights; names may carry a ``backbone.`` prefix."""
    tensors, _ = load_weights(path)
    stripped = {}
    for name, arr in tensors.items():
        if name.startswith("backbone."):
            stripped[name[len("backbone."):]] = arr
        elif name.split(".")[0] not in ("fc_tool", "fc_phase"):
            stripped[name] = arr
    _assign(dict(model.backbone.named_parameters()), stripped, str(path))


def save_checkpoint(path, model: ToolPresenceNet, extra: Optional[dict] = None) -> None:
    meta = {"model_spec": model.spec.to_dict()}
    if extra:
        meta.update(extra)
    save_weights(path, dict(model.named_parameters()), meta)


def load_checkpoint(path, spec: Optional[ModelSpec] = None) -> ToolPresenceNet:
    """Rebuild a model from a checkpoint, optionally under an explicit spec."""
    tensors, meta = load_weights(path)
    if spec is None:
        if "model_spec" not in meta:
            raise WeightsLoadError(f"{path}: no model spec recorded; pass one explicitly")
        spec = ModelSpec.from_dict(meta["model_spec"])
    model = ToolPresenceNet(spec)
    _assign(dict(model.named_parameters()), tensors, str(path))
    return model


def with_variant(spec: ModelSpec, variant: str, phase_count: Optional[int] = None) -> ModelSpec:
    if variant == "ToolNet":
        return replace(spec, variant=variant, phase_count=None)
    return replace(spec, variant=variant, phase_count=phase_count or spec.phase_count or DEFAULT_PHASE_COUNT)

