"""Space-time network zoo and the differentiable-computation contract.

Two desk-scale architectures: `mini_c3d` (four space-time conv blocks) and
`factorized_st` (same depth, each block split into a spatial then a temporal
conv). Blocks are conv -> batchnorm -> SiLU -> average pool; the head is a
global average pool plus a linear classifier. SiLU and average pooling are
deliberate: the whole forward pass is smooth, so central finite differences
are a valid oracle for the gradient checks.

The second half of the file is the flat-parameter machinery: a canonical
ordering of all parameters as one vector, differentiable unflattening, and
`unrolled_steps`, which runs plain SGD through `torch.func.functional_call`
so that the map from (synthetic clips, labels, lr) to the final parameter
vector supports second-order gradients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, TrainingError

ARCHS = ("mini_c3d", "factorized_st")
BASE_WIDTHS = (16, 32, 64, 64)
POOL_DEPTH = 4  # each block halves every axis (ceil mode)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture identity: everything the parameter count depends on.

    input_size is (L, C, H, W) of one clip; norm_mean/std are per-channel
    input normalization constants applied inside the forward pass.
    """

    arch: str = "mini_c3d"
    input_size: tuple = (8, 3, 16, 16)
    num_classes: int = 4
    width_mult: float = 1.0
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        size = tuple(int(x) for x in self.input_size)
        if len(size) != 4 or min(size) < 1:
            raise ConfigError(f"input_size must be 4 positive ints, got {self.input_size}")
        object.__setattr__(self, "input_size", size)
        length, chans, height, width = size
        side = 2 ** POOL_DEPTH
        if height % side or width % side:
            raise ConfigError(
                f"spatial size {height}x{width} incompatible with {POOL_DEPTH} "
                f"pooling stages (must be divisible by {side})"
            )
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not self.width_mult > 0:
            raise ConfigError("width_mult must be positive")
        mean = tuple(float(x) for x in self.norm_mean)
        std = tuple(float(x) for x in self.norm_std)
        if len(mean) != chans or len(std) != chans:
            raise ConfigError(
                f"normalization stats must have {chans} channels, "
                f"got {len(mean)}/{len(std)}"
            )
        if any(s <= 0 for s in std):
            raise ConfigError("norm_std entries must be positive")
        object.__setattr__(self, "norm_mean", mean)
        object.__setattr__(self, "norm_std", std)

    def widths(self) -> tuple:
        return tuple(max(1, int(round(w * self.width_mult))) for w in BASE_WIDTHS)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "input_size": list(self.input_size),
            "num_classes": self.num_classes, "width_mult": self.width_mult,
            "norm_mean": list(self.norm_mean), "norm_std": list(self.norm_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            arch=d["arch"], input_size=tuple(d["input_size"]),
            num_classes=int(d["num_classes"]),
            width_mult=float(d.get("width_mult", 1.0)),
            norm_mean=tuple(d.get("norm_mean", (0.5,) * tuple(d["input_size"])[1])),
            norm_std=tuple(d.get("norm_std", (0.5,) * tuple(d["input_size"])[1])),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class _Block3d(nn.Module):
    def __init__(self, cin, cout, pool_kernel):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm = nn.BatchNorm3d(cout)
        self.act = nn.SiLU()
        self.pool = nn.AvgPool3d(pool_kernel, ceil_mode=True)

    def forward(self, x):
        return self.pool(self.act(self.norm(self.conv(x))))


class _BlockFactorized(nn.Module):
    def __init__(self, cin, cout, pool_kernel):
        super().__init__()
        self.conv_s = nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1))
        self.norm_s = nn.BatchNorm3d(cout)
        self.conv_t = nn.Conv3d(cout, cout, (3, 1, 1), padding=(1, 0, 0))
        self.norm_t = nn.BatchNorm3d(cout)
        self.act = nn.SiLU()
        self.pool = nn.AvgPool3d(pool_kernel, ceil_mode=True)

    def forward(self, x):
        x = self.act(self.norm_s(self.conv_s(x)))
        x = self.act(self.norm_t(self.conv_t(x)))
        return self.pool(x)


class VideoNet(nn.Module):
    """Clip classifier. Input [B, C, T, H, W] with pixels in [0, 1]."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        block = _Block3d if spec.arch == "mini_c3d" else _BlockFactorized
        widths = spec.widths()
        length, cin, height, width = spec.input_size
        dims = [length, height, width]
        stages = []
        for cout in widths:
            # halve each axis while it still has room (size-1 axes pass through)
            kernel = tuple(2 if d >= 2 else 1 for d in dims)
            stages.append(block(cin, cout, kernel))
            dims = [-(-d // k) for d, k in zip(dims, kernel)]
            cin = cout
        self.blocks = nn.Sequential(*stages)
        self.head = nn.Linear(widths[-1], spec.num_classes)
        shape = (1, spec.input_size[1], 1, 1, 1)
        self.register_buffer("in_mean", torch.tensor(spec.norm_mean).reshape(shape))
        self.register_buffer("in_std", torch.tensor(spec.norm_std).reshape(shape))

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    def forward_features(self, x):
        x = (x - self.in_mean) / self.in_std
        x = self.blocks(x)
        return x.mean(dim=(2, 3, 4))

    def forward(self, x):
        return self.head(self.forward_features(x))


def build_model(spec: ModelSpec, seed: int) -> VideoNet:
    """Construct a freshly initialized network, deterministic in seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VideoNet(spec)
    return model


def param_count(spec: ModelSpec) -> int:
    """Exact trainable-parameter count for a spec."""
    return sum(p.numel() for p in build_model(spec, 0).parameters())


def clips_to_tensor(clips, dtype=torch.float32) -> torch.Tensor:
    """Stack [T, C, H, W] frame arrays into a [B, C, T, H, W] batch tensor."""
    arr = np.stack([np.asarray(c) for c in clips])
    return torch.from_numpy(arr).to(dtype).permute(0, 2, 1, 3, 4).contiguous()


# ---------------------------------------------------------------------------
# flat parameter vectors


def param_slices(model: nn.Module):
    """Canonical ordering: (name, shape, start, end) per named parameter."""
    out, start = [], 0
    for name, p in model.named_parameters():
        end = start + p.numel()
        out.append((name, tuple(p.shape), start, end))
        start = end
    return out


def flatten_params(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).clone()


def load_flat_params(model: nn.Module, vec: torch.Tensor) -> None:
    slices = param_slices(model)
    if vec.numel() != slices[-1][3]:
        raise ConfigError(
            f"parameter vector length {vec.numel()} != model size {slices[-1][3]}"
        )
    with torch.no_grad():
        for (_, shape, start, end), p in zip(slices, model.parameters()):
            p.copy_(vec[start:end].reshape(shape))


def functional_params(model: nn.Module, vec: torch.Tensor) -> dict:
    """Name->tensor views of a flat vector; differentiable w.r.t. the vector."""
    slices = param_slices(model)
    if vec.numel() != slices[-1][3]:
        raise ConfigError(
            f"parameter vector length {vec.numel()} != model size {slices[-1][3]}"
        )
    pieces = torch.split(vec, [end - start for _, _, start, end in slices])
    return {name: piece.view(shape)
            for (name, shape, _, _), piece in zip(slices, pieces)}


def flatten_buffers(model: nn.Module) -> torch.Tensor:
    """Floating-point buffers (running stats, norm constants) as one vector."""
    parts = [b.detach().reshape(-1) for _, b in model.named_buffers()
             if b.is_floating_point()]
    if not parts:
        return torch.zeros(0)
    return torch.cat(parts).clone()


def load_flat_buffers(model: nn.Module, vec: torch.Tensor) -> None:
    floats = [b for _, b in model.named_buffers() if b.is_floating_point()]
    total = sum(b.numel() for b in floats)
    if vec.numel() != total:
        raise ConfigError(f"buffer vector length {vec.numel()} != expected {total}")
    with torch.no_grad():
        offset = 0
        for b in floats:
            b.copy_(vec[offset:offset + b.numel()].reshape(b.shape))
            offset += b.numel()


def buffer_overrides(model: nn.Module, vec: torch.Tensor | None = None) -> dict:
    """Detached buffer clones for functional_call.

    Floating buffers come from `vec` when given (a recorded buffer vector),
    otherwise from the module; integer buffers (batch counters) are cloned
    from the module so functional forward passes never mutate the template.
    """
    out, offset = {}, 0
    for name, b in model.named_buffers():
        if b.is_floating_point() and vec is not None:
            out[name] = vec[offset:offset + b.numel()].detach().clone().reshape(b.shape)
            offset += b.numel()
        else:
            out[name] = b.detach().clone()
    if vec is not None and offset != vec.numel():
        raise ConfigError(f"buffer vector length {vec.numel()} != expected {offset}")
    return out


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against integer labels or against target logits.

    Float targets are treated as logits and softmaxed, so gradients flow to
    learnable labels; integer targets fall back to ordinary cross-entropy.
    """
    if targets.is_floating_point():
        q = F.softmax(targets, dim=-1)
        return -(q * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()
    return F.cross_entropy(logits, targets)


def unrolled_steps(model: nn.Module, theta_start: torch.Tensor, batches,
                   lr, steps: int | None = None,
                   buffer_vec: torch.Tensor | None = None) -> torch.Tensor:
    """Run plain SGD from a flat parameter vector, keeping the graph.

    `batches` is a sequence of (clips, targets); step i uses batch i modulo
    the sequence length, and `steps` defaults to the sequence length. The
    returned vector is differentiable w.r.t. clips, float targets, lr (when a
    tensor), and theta_start. Normalization layers run in training mode, i.e.
    on batch statistics; recorded running stats only seed the buffer clones.
    """
    batches = list(batches)
    if not batches:
        raise ConfigError("unrolled_steps needs at least one batch")
    if steps is None:
        steps = len(batches)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    theta = theta_start
    if not theta.requires_grad:
        theta = theta.detach().clone().requires_grad_(True)
    if not torch.is_tensor(lr):
        lr = torch.as_tensor(lr, dtype=theta.dtype)
    bufs = buffer_overrides(model, buffer_vec)
    was_training = model.training
    model.train()
    try:
        for step in range(steps):
            clips, targets = batches[step % len(batches)]
            params = functional_params(model, theta)
            logits = torch.func.functional_call(model, {**params, **bufs}, (clips,))
            loss = soft_cross_entropy(logits, targets)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss in unrolled step {step}")
            (grad,) = torch.autograd.grad(loss, theta, create_graph=True)
            theta = theta - lr * grad
    finally:
        model.train(was_training)
    return theta
