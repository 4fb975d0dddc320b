"""MTA-UNet and the single-task U-Net baseline.

One shared convolutional encoder feeds three task decoders, one per output
group: (ux, sxx), (uy, syy), (sxy).  Each decoder upsamples with stride-2
transposed convolutions and re-injects encoder features through an additive
attention gate before the usual skip concatenation, ending in a 1x1 head
with the task's channel count.  The STL baseline reuses the same topology
with a single decoder and a one-channel head; five independent instances
cover the five fields.

Everything runs in float64 with a deterministic seeded initialization so
training histories and checkpoints are reproducible bit for bit.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TASK_FIELDS = (("ux", "sxx"), ("uy", "syy"), ("sxy",))
OUTPUT_FIELDS = ("ux", "uy", "sxx", "syy", "sxy")

CHECKPOINT_MAGIC = b"MTAW"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable checkpoint: wrong magic, wrong version, or truncated."""


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**m for m in range(self.levels))

    def check_spatial(self, h: int, w: int):
        d = 2 ** (self.levels - 1)
        if h % d or w % d:
            raise ValueError(f"spatial dims ({h}, {w}) not divisible by {d}")


class DoubleConv(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    """Double-conv blocks with 2x2 max pooling in between; returns the
    skip pyramid [f1 .. fD], finest first."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.channels
        ins = (config.in_channels,) + chans[:-1]
        self.blocks = nn.ModuleList(DoubleConv(i, o) for i, o in zip(ins, chans))
        self.pool = nn.MaxPool2d(kernel_size=2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        pyramid = []
        for m, block in enumerate(self.blocks):
            if m > 0:
                x = self.pool(x)
            x = block(x)
            pyramid.append(x)
        return pyramid


class AttentionGate(nn.Module):
    """Additive gate: both features are projected to f_channels//2 channels,
    summed, rectified, squeezed to one channel, and squashed to (0, 1); the
    coefficient map multiplies the skip feature elementwise.  The coarser
    gating feature is bilinearly upsampled to the skip resolution first."""

    def __init__(self, f_channels: int, g_channels: int):
        super().__init__()
        inter = max(f_channels // 2, 1)
        self.proj_f = nn.Conv2d(f_channels, inter, kernel_size=1)
        self.proj_g = nn.Conv2d(g_channels, inter, kernel_size=1)
        self.psi = nn.Conv2d(inter, 1, kernel_size=1)

    def coefficients(self, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if g.shape[-2:] != f.shape[-2:]:
            g = F.interpolate(g, size=f.shape[-2:], mode="bilinear",
                              align_corners=True)
        return torch.sigmoid(self.psi(F.relu(self.proj_f(f) + self.proj_g(g))))

    def forward(self, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return self.coefficients(f, g) * f


class DecoderStep(nn.Module):
    """Upsample the coarse feature, gate the matching skip against the
    pre-upsampling feature, concatenate, and fuse with a double conv."""

    def __init__(self, coarse_channels: int, fine_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(coarse_channels, fine_channels,
                                     kernel_size=2, stride=2)
        self.gate = AttentionGate(fine_channels, coarse_channels)
        self.fuse = DoubleConv(2 * fine_channels, fine_channels)

    def forward(self, g: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        gated = self.gate(skip, g)
        return self.fuse(torch.cat([gated, self.up(g)], dim=1))


class TaskDecoder(nn.Module):
    def __init__(self, config: ModelConfig, out_channels: int):
        super().__init__()
        chans = config.channels
        self.steps = nn.ModuleList(
            DecoderStep(chans[m + 1], chans[m])
            for m in reversed(range(config.levels - 1)))
        self.head = nn.Conv2d(chans[0], out_channels, kernel_size=1)

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        g = pyramid[-1]
        for step, skip in zip(self.steps, reversed(pyramid[:-1])):
            g = step(g, skip)
        return self.head(g)


class MtaUNet(nn.Module):
    """Shared encoder, one attention-gated decoder per task group."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoders = nn.ModuleList(
            TaskDecoder(config, len(fields)) for fields in TASK_FIELDS)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        self.config.check_spatial(*x.shape[-2:])
        pyramid = self.encoder(x)
        return tuple(dec(pyramid) for dec in self.decoders)

    def predict_fields(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Field name -> (batch, ny, nx) tensor, normalized scale."""
        outs = self.forward(x)
        fields = {}
        for task_out, names in zip(outs, TASK_FIELDS):
            for c, name in enumerate(names):
                fields[name] = task_out[:, c]
        return fields


class StlUNet(nn.Module):
    """Same topology, one decoder, one output channel: the per-field
    baseline trained independently five times."""

    def __init__(self, config: ModelConfig, field: str):
        super().__init__()
        if field not in OUTPUT_FIELDS:
            raise ValueError(f"unknown field {field!r}")
        self.config = config
        self.field = field
        self.encoder = Encoder(config)
        self.decoder = TaskDecoder(config, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.config.check_spatial(*x.shape[-2:])
        return self.decoder(self.encoder(x))

    def predict_fields(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        return {self.field: self.forward(x)[:, 0]}


class StlEnsemble(nn.Module):
    """Five independent single-field U-Nets presented as one predictor; the
    baseline counterpart of the multi-task net."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.nets = nn.ModuleDict(
            {name: StlUNet(config, name) for name in OUTPUT_FIELDS})

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        return tuple(self.nets[name](x) for name in OUTPUT_FIELDS)

    def predict_fields(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        return {name: net(x)[:, 0] for name, net in self.nets.items()}


def init_parameters(module: nn.Module, seed: int):
    """Fan-in-scaled normal init for conv weights, zero biases, identity
    norm affine; deterministic given seed (fixed registration order)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(p)
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)
        for name, b in module.named_buffers():
            if name.endswith("running_mean"):
                b.zero_()
            elif name.endswith("running_var"):
                b.fill_(1.0)
            elif name.endswith("num_batches_tracked"):
                b.zero_()


def build_model(kind: str, config: ModelConfig, field: str | None = None) -> nn.Module:
    if kind == "mta-unet":
        model = MtaUNet(config)
    elif kind == "unet-stl":
        model = StlEnsemble(config)
    elif kind == "stl-unet":
        if field is None:
            raise ValueError("stl-unet needs a target field")
        model = StlUNet(config, field)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    model.double()
    init_parameters(model, config.seed)
    return model


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _model_kind(model: nn.Module) -> str:
    if isinstance(model, MtaUNet):
        return "mta-unet"
    if isinstance(model, StlEnsemble):
        return "unet-stl"
    return "stl-unet"


def save_checkpoint(path: str, model: nn.Module, extra: dict | None = None):
    """Binary checkpoint: magic, version, JSON config block, then every
    state-dict tensor as (name_len u8, name, rank u32, dims u32.., float64
    little-endian data).  Written atomically."""
    config = {
        "kind": _model_kind(model),
        "levels": model.config.levels,
        "base_channels": model.config.base_channels,
        "in_channels": model.config.in_channels,
        "seed": model.config.seed,
        "extra": extra or {},
    }
    if isinstance(model, StlUNet):
        config["field"] = model.field
    blob = json.dumps(config, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, tensor in model.state_dict().items():
        encoded = name.encode("ascii")
        arr = tensor.detach().cpu().to(torch.float64).numpy()
        buf.write(struct.pack("<B", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype("<f8").tobytes())

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str) -> tuple[nn.Module, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = json.loads(_read_exact(fh, blob_len, "config").decode("utf-8"))

        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(1)
            if not head:
                break
            name = _read_exact(fh, head[0], "tensor name").decode("ascii")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims)

    cfg = ModelConfig(levels=config["levels"], base_channels=config["base_channels"],
                      in_channels=config["in_channels"], seed=config["seed"])
    model = build_model(config["kind"], cfg, field=config.get("field"))
    state = model.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match the architecture")
    for name, arr in tensors.items():
        state[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    model.load_state_dict(state)
    return model, config.get("extra", {})
