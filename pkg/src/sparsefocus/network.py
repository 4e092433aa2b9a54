"""Full-resolution dilated encoder-decoder with up to three task heads.

Every block runs a 5x5 and a 3x3 dilated convolution in parallel, each
followed by batch norm and ELU, and concatenates the two branches. There is
no pooling or striding anywhere, so outputs keep the input's spatial size.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError, MissingFileError, SampleFormatError, UnsupportedVersionError
from .variants import Variant

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    blocks_per_level: int = 2
    base_channels: int = 16
    kernel_sizes: tuple[int, int] = (5, 3)
    dilation_schedule: tuple[int, ...] = (1, 2, 4)
    head_batchnorm: bool = True
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9
    # smallest accepted input side; tiny gradient-check models lower it
    min_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "dilation_schedule", tuple(int(d) for d in self.dilation_schedule))
        if self.levels < 1 or self.blocks_per_level < 1 or self.base_channels < 1:
            raise ContractError("levels, blocks_per_level and base_channels must be >= 1")
        if len(self.dilation_schedule) != self.levels:
            raise ContractError(
                f"dilation_schedule has {len(self.dilation_schedule)} entries for {self.levels} levels"
            )
        if any(d < 1 for d in self.dilation_schedule):
            raise ContractError("dilations must be >= 1")
        if len(self.kernel_sizes) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ContractError("kernel_sizes must be two odd sizes")
        if not 0.0 <= self.bn_momentum < 1.0 or self.bn_epsilon <= 0:
            raise ContractError("invalid batch-norm hyperparameters")
        if self.min_size < 1:
            raise ContractError("min_size must be >= 1")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["dilation_schedule"] = list(self.dilation_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _batchnorm(channels: int, cfg: ModelConfig) -> nn.BatchNorm2d:
    # running = m * running + (1 - m) * batch, i.e. torch momentum = 1 - m
    return nn.BatchNorm2d(channels, eps=cfg.bn_epsilon, momentum=1.0 - cfg.bn_momentum)


class ConvBranch(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int, dilation: int, cfg: ModelConfig):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv = nn.Conv2d(cin, cout, kernel, padding=pad, dilation=dilation)
        self.bn = _batchnorm(cout, cfg)
        self.act = nn.ELU()


class MultiScaleBlock(nn.Module):
    """Parallel large/small kernel branches at one dilation, concatenated."""

    def __init__(self, cin: int, cout: int, dilation: int, cfg: ModelConfig):
        super().__init__()
        k_large, k_small = cfg.kernel_sizes
        half = cout // 2
        self.large = ConvBranch(cin, half, k_large, dilation, cfg)
        self.small = ConvBranch(cin, cout - half, k_small, dilation, cfg)

    def forward(self, x):
        return torch.cat([self.large(x), self.small(x)], dim=1)


class Head(nn.Module):
    def __init__(self, cin: int, activation: str, cfg: ModelConfig):
        super().__init__()
        self.conv = nn.Conv2d(cin, 1, 1)
        self.bn = _batchnorm(1, cfg) if cfg.head_batchnorm else None
        self.activation = activation

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        if self.activation == "relu":
            return torch.relu(y)
        if self.activation == "sigmoid":
            return torch.sigmoid(y)
        return y


HEAD_ACTIVATIONS = {"sct": "linear", "bone": "relu", "mask": "sigmoid"}


@dataclass
class TaskOutputs:
    """Head outputs, each ``B x 1 x H x W``; absent heads are ``None``.

    ``sct`` and ``bone`` are in the model's scaled value space (HU * value_scale).
    """

    sct: torch.Tensor
    bone: torch.Tensor | None = None
    mask: torch.Tensor | None = None

    def items(self):
        return [(n, getattr(self, n)) for n in ("sct", "bone", "mask") if getattr(self, n) is not None]

    def numpy(self, index: int | None = None) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.items():
            arr = t.detach().cpu().numpy()[:, 0]
            out[name] = arr if index is None else arr[index]
        return out


class SparseFocusNet(nn.Module):
    """Shared dilated encoder-decoder trunk plus per-task 1x1 heads."""

    def __init__(self, cfg: ModelConfig, variant: Variant):
        super().__init__()
        self.cfg = cfg
        self.variant = Variant.parse(variant)
        self.value_scale = 1e-3

        self.encoder = nn.ModuleList()
        cin = 1
        for level in range(cfg.levels):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(MultiScaleBlock(cin, cfg.width(level), cfg.dilation_schedule[level], cfg))
                cin = cfg.width(level)
            self.encoder.append(blocks)

        # decoder levels run deepest-first with the reversed dilation schedule;
        # each concatenates the matching encoder output except the deepest one,
        # whose input already is that output
        self.decoder = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            blocks = nn.ModuleList()
            if level < cfg.levels - 1:
                cin += cfg.width(level)
            for _ in range(cfg.blocks_per_level):
                blocks.append(MultiScaleBlock(cin, cfg.width(level), cfg.dilation_schedule[level], cfg))
                cin = cfg.width(level)
            self.decoder.append(blocks)

        self.heads = nn.ModuleDict(
            {name: Head(cin, HEAD_ACTIVATIONS[name], cfg) for name in self.variant.heads}
        )

    def receptive_radius(self) -> int:
        k = max(self.cfg.kernel_sizes)
        per_block = [(k - 1) // 2 * d for d in self.cfg.dilation_schedule]
        return 2 * self.cfg.blocks_per_level * sum(per_block)

    def forward(self, x: torch.Tensor) -> TaskOutputs:
        skips = []
        h = x
        for blocks in self.encoder:
            for block in blocks:
                h = block(h)
            skips.append(h)
        for i, blocks in enumerate(self.decoder):
            level = self.cfg.levels - 1 - i
            if i > 0:
                h = torch.cat([h, skips[level]], dim=1)
            for block in blocks:
                h = block(h)
        return TaskOutputs(**{name: head(h) for name, head in self.heads.items()})


def init_parameters(model: SparseFocusNet, seed: int) -> None:
    """He (fan-in) normal kernels, zero biases, unit/zero batch-norm affine."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            owner = model.get_submodule(name.rsplit(".", 1)[0])
            if isinstance(owner, nn.Conv2d) and name.endswith("weight"):
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * np.sqrt(2.0 / fan_in))
            elif isinstance(owner, nn.BatchNorm2d) and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()


def build_model(cfg: ModelConfig | None = None, variant=Variant.THREE_TASK, seed: int = 0) -> SparseFocusNet:
    model = SparseFocusNet(cfg or ModelConfig(), Variant.parse(variant))
    init_parameters(model, seed)
    return model


def parameter_count_closed_form(cfg: ModelConfig, variant) -> int:
    """Parameter count derived from the layer structure, independent of torch."""
    variant = Variant.parse(variant)
    k_large, k_small = cfg.kernel_sizes

    def block(cin, cout):
        half = cout // 2
        rest = cout - half
        # kernel + bias + bn scale/shift per branch
        return (cin * half * k_large**2 + 3 * half) + (cin * rest * k_small**2 + 3 * rest)

    total = 0
    cin = 1
    for level in range(cfg.levels):
        for _ in range(cfg.blocks_per_level):
            total += block(cin, cfg.width(level))
            cin = cfg.width(level)
    for level in reversed(range(cfg.levels)):
        if level < cfg.levels - 1:
            cin += cfg.width(level)
        for _ in range(cfg.blocks_per_level):
            total += block(cin, cfg.width(level))
            cin = cfg.width(level)
    per_head = cin + 1 + (2 if cfg.head_batchnorm else 0)
    return total + per_head * len(variant.heads)


def check_input(model: SparseFocusNet, mr) -> torch.Tensor:
    x = torch.as_tensor(mr)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ContractError(f"expected a B x 1 x H x W batch, got shape {tuple(x.shape)}")
    if min(x.shape[2], x.shape[3]) < model.cfg.min_size:
        raise ContractError(
            f"input {tuple(x.shape[2:])} smaller than the minimum side {model.cfg.min_size}"
        )
    dtype = next(model.parameters()).dtype
    return x.to(dtype)


def forward(model: SparseFocusNet, mr, train: bool = False) -> TaskOutputs:
    """Run the network. In train mode the outputs carry the autograd graph
    (the activation cache used by :func:`backward`) and running batch-norm
    statistics are updated."""
    x = check_input(model, mr)
    model.train(train)
    if train:
        return model(x)
    with torch.no_grad():
        return model(x)


def backward(model: SparseFocusNet, cached: TaskOutputs | None, output_grads) -> dict[str, torch.Tensor]:
    """Parameter gradients given d(loss)/d(head output) for each head.

    Heads missing from ``output_grads`` contribute nothing.
    """
    if cached is None or cached.sct is None or cached.sct.grad_fn is None:
        raise ContractError("backward needs the outputs of a train-mode forward pass")
    outs, grads = [], []
    for name, tensor in cached.items():
        g = output_grads.get(name) if output_grads else None
        if g is None:
            continue
        g = torch.as_tensor(g, dtype=tensor.dtype).reshape(tensor.shape)
        outs.append(tensor)
        grads.append(g)
    params = list(model.named_parameters())
    if not outs:
        return {n: torch.zeros_like(p) for n, p in params}
    got = torch.autograd.grad(outs, [p for _, p in params], grads, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(params, got)}


def trunk_parameter_names(model: SparseFocusNet) -> list[str]:
    return [n for n, _ in model.named_parameters() if not n.startswith("heads.")]


# ----------------------------------------------------------------------------
# checkpoints


def _state_entries(model: SparseFocusNet):
    """Parameters first, then running statistics, in a fixed order."""
    entries = [(n, p) for n, p in model.named_parameters()]
    entries += [(n, b) for n, b in model.named_buffers() if not n.endswith("num_batches_tracked")]
    return entries


def save_checkpoint(model: SparseFocusNet, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    chunks = []
    for name, tensor in _state_entries(model):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "variant": model.variant.value,
        "value_scale": model.value_scale,
        "parameters": manifest,
        "total_bytes": offset,
    }
    if extra:
        doc["extra"] = extra
    (directory / "model.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (directory / "model.f32").write_bytes(b"".join(chunks))
    return directory


def load_checkpoint(directory) -> SparseFocusNet:
    directory = Path(directory)
    meta_path, data_path = directory / "model.json", directory / "model.f32"
    for p in (meta_path, data_path):
        if not p.is_file():
            raise MissingFileError(f"missing checkpoint file {p}")
    doc = json.loads(meta_path.read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {doc.get('version')!r}")
    raw = data_path.read_bytes()
    if len(raw) != doc["total_bytes"]:
        raise SampleFormatError(f"model.f32 holds {len(raw)} bytes, manifest says {doc['total_bytes']}")
    model = SparseFocusNet(ModelConfig.from_dict(doc["config"]), Variant.parse(doc["variant"]))
    model.value_scale = float(doc["value_scale"])
    entries = dict(_state_entries(model))
    if set(entries) != {e["name"] for e in doc["parameters"]}:
        raise SampleFormatError("checkpoint manifest does not match the model structure")
    with torch.no_grad():
        for e in doc["parameters"]:
            arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=e["offset"])
            target = entries[e["name"]]
            if list(target.shape) != e["shape"]:
                raise SampleFormatError(f"shape mismatch for {e['name']}")
            target.copy_(torch.from_numpy(arr.reshape(e["shape"]).copy()))
    model.eval()
    return model


def checkpoint_extra(directory) -> dict:
    doc = json.loads((Path(directory) / "model.json").read_text())
    return doc.get("extra", {})
