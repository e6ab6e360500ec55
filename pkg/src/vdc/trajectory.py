"""Expert training trajectories: recording, serialization, teacher wrapper.

An expert is a network trained normally on the real dataset; its parameter
vector is snapshotted at every epoch boundary (including initialization), and
floating-point buffers (running norm stats) ride along per snapshot. The
trajectory file is one JSON header line followed by raw little-endian float32
blocks, so a directory of experts stays cheap to memory-map and diff.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataio import VideoDataset
from .errors import CompatibilityError, ConfigError, FormatError, TrainingError
from .models import (
    ModelSpec,
    VideoNet,
    build_model,
    buffer_overrides,
    clips_to_tensor,
    flatten_buffers,
    flatten_params,
    load_flat_buffers,
    load_flat_params,
)
from .temporal import SamplingPlan, duplication_pad, sample_window

TRAJECTORY_FORMAT = "vdc-trajectory-v1"


@dataclass
class ExpertConfig:
    """Optimizer settings for expert training (plain SGD by default)."""

    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 16

    def to_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum,
                "batch_size": self.batch_size}


@dataclass
class ExpertTrajectory:
    """Parameter snapshots {theta_0 .. theta_n} plus per-snapshot buffers."""

    arch: str
    spec_hash: str
    epochs: int
    seed: int
    params: list
    buffers: list
    config: dict = field(default_factory=dict)
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.params) != self.epochs + 1:
            raise FormatError(
                f"trajectory holds {len(self.params)} snapshots for "
                f"{self.epochs} epochs (want epochs + 1)"
            )
        if len(self.buffers) != len(self.params):
            raise FormatError("buffer snapshot count != parameter snapshot count")
        sizes = {int(p.numel()) for p in self.params}
        if len(sizes) != 1:
            raise FormatError(f"snapshot vectors differ in length: {sorted(sizes)}")
        bsizes = {int(b.numel()) for b in self.buffers}
        if len(bsizes) != 1:
            raise FormatError("buffer vectors differ in length")

    @property
    def last_index(self) -> int:
        return self.epochs

    @property
    def param_count(self) -> int:
        return int(self.params[0].numel())

    @property
    def buffer_count(self) -> int:
        return int(self.buffers[0].numel())

    def snapshot(self, t: int) -> tuple:
        return self.params[t], self.buffers[t]

    def model_spec(self) -> ModelSpec:
        if not self.spec:
            raise CompatibilityError(
                "trajectory carries no model spec (written by an older tool?)")
        got = ModelSpec.from_dict(self.spec)
        if got.hash() != self.spec_hash:
            raise FormatError(
                f"trajectory spec hash {self.spec_hash} does not match its "
                f"embedded spec ({got.hash()})")
        return got


def random_training_clip(frames: np.ndarray, input_length: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Uniform window of the input length from a real video (pad if short)."""
    frames = duplication_pad(frames, input_length)
    plan = SamplingPlan("sliding_window", input_length, input_length, input_length)
    start, window = sample_window(plan, rng, length=frames.shape[0])
    return frames[start:start + window]


def train_expert(model: VideoNet, dataset: VideoDataset, epochs: int,
                 config: ExpertConfig | None = None,
                 seed: int = 0) -> ExpertTrajectory:
    """Train on hard labels with SGD, snapshotting every epoch boundary."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    config = config or ExpertConfig()
    spec = model.spec
    input_length = spec.input_size[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7261]))
    opt = torch.optim.SGD(model.parameters(), lr=config.lr,
                          momentum=config.momentum)
    params = [flatten_params(model)]
    buffers = [flatten_buffers(model)]
    labels = np.array([it.label for it in dataset.items])
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            clips = [random_training_clip(dataset[i].frames, input_length, rng)
                     for i in idx]
            batch = clips_to_tensor(clips)
            target = torch.from_numpy(labels[idx]).long()
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(model(batch), target)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite expert loss at epoch {epoch}")
            loss.backward()
            opt.step()
        params.append(flatten_params(model))
        buffers.append(flatten_buffers(model))
    return ExpertTrajectory(
        arch=spec.arch, spec_hash=spec.hash(), epochs=epochs, seed=seed,
        params=params, buffers=buffers, config=config.to_dict(),
        spec=spec.to_dict(),
    )


def save_trajectory(traj: ExpertTrajectory, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": TRAJECTORY_FORMAT,
        "arch": traj.arch,
        "spec_hash": traj.spec_hash,
        "epochs": traj.epochs,
        "seed": traj.seed,
        "param_count": traj.param_count,
        "buffer_count": traj.buffer_count,
        "config": traj.config,
        "spec": traj.spec,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for theta, buf in zip(traj.params, traj.buffers):
            f.write(theta.numpy().astype("<f4").tobytes())
            f.write(buf.numpy().astype("<f4").tobytes())
    return path


def load_trajectory(path, spec: ModelSpec | None = None) -> ExpertTrajectory:
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: bad header ({e})") from e
    if header.get("format") != TRAJECTORY_FORMAT:
        raise FormatError(f"{path}: unknown format {header.get('format')!r}")
    epochs = int(header["epochs"])
    pc, bc = int(header["param_count"]), int(header["buffer_count"])
    body = data[nl + 1:]
    expect = (epochs + 1) * (pc + bc) * 4
    if len(body) != expect:
        raise FormatError(
            f"{path}: body is {len(body)} bytes, expected {expect} (truncated?)"
        )
    params, buffers = [], []
    stride = (pc + bc) * 4
    for i in range(epochs + 1):
        block = body[i * stride:(i + 1) * stride]
        vec = np.frombuffer(block, dtype="<f4")
        params.append(torch.from_numpy(vec[:pc].copy()))
        buffers.append(torch.from_numpy(vec[pc:].copy()))
    traj = ExpertTrajectory(
        arch=header["arch"], spec_hash=header["spec_hash"], epochs=epochs,
        seed=int(header["seed"]), params=params, buffers=buffers,
        config=header.get("config", {}), spec=header.get("spec", {}),
    )
    if spec is not None:
        check_compatible(traj, spec)
    return traj


def check_compatible(traj: ExpertTrajectory, spec: ModelSpec) -> None:
    if traj.arch != spec.arch:
        raise CompatibilityError(
            f"trajectory was recorded on {traj.arch!r}, model spec is {spec.arch!r}"
        )
    if traj.spec_hash != spec.hash():
        raise CompatibilityError(
            f"trajectory spec hash {traj.spec_hash} != model spec hash {spec.hash()}"
        )


class Teacher:
    """Frozen trained network used for scoring, features, and soft labels."""

    def __init__(self, model: VideoNet):
        self.model = model.eval()
        for p in self.model.parameters():  # grads flow to inputs only
            p.requires_grad_(False)
        self.spec = model.spec
        blob = flatten_params(model).numpy().astype("<f4").tobytes()
        self.id = f"{model.spec.arch}-{hashlib.sha256(blob).hexdigest()[:12]}"

    @classmethod
    def from_trajectory(cls, traj: ExpertTrajectory, spec: ModelSpec,
                        snapshot: int = -1) -> "Teacher":
        check_compatible(traj, spec)
        model = build_model(spec, seed=0)
        theta, buf = traj.params[snapshot], traj.buffers[snapshot]
        load_flat_params(model, theta)
        load_flat_buffers(model, buf)
        return cls(model)

    @torch.no_grad()
    def logits(self, clips: torch.Tensor) -> torch.Tensor:
        self.model.eval()
        return self.model(clips)

    @torch.no_grad()
    def features(self, clips: torch.Tensor) -> torch.Tensor:
        self.model.eval()
        return self.model.forward_features(clips)

    def logits_with_batch_stats(self, clips: torch.Tensor) -> torch.Tensor:
        """Forward in training mode without touching recorded running stats."""
        params = {n: p.detach() for n, p in self.model.named_parameters()}
        bufs = buffer_overrides(self.model)
        was = self.model.training
        self.model.train()
        try:
            with torch.no_grad():
                return torch.func.functional_call(
                    self.model, {**params, **bufs}, (clips,))
        finally:
            self.model.train(was)
