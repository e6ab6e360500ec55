"""Temporal sampling and frame-rate conversion.

A condensed video stores T_c frames; the network eats clips of a fixed input
length L. This module owns the mapping between the two: how a window of W
frames is chosen from storage (naive / segment / sliding_window) and how that
window is stretched or kept as-is to length L (none / duplication / linear).

Everything here is shape arithmetic, so the functions accept both numpy
arrays and torch tensors along the leading (time) axis. Keeping the linear
blend as an index-gather plus affine combination means gradients flow through
stored frames when they are torch tensors that require grad.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import ceil

import numpy as np

from .errors import PlanError

SAMPLING_METHODS = ("naive", "segment", "sliding_window")
INTERPOLATION_MODES = ("none", "duplication", "linear")


@dataclass(frozen=True)
class SamplingPlan:
    """How clips of length `input_length` are drawn from `stored_length` frames.

    method:
      naive          the window is the whole stored video (window == stored_length)
      segment        the video splits into window-sized segments; one is picked
      sliding_window any contiguous window of size `window` is admissible
    interpolation:
      none           window must already equal input_length
      duplication    each frame repeats input_length // window times
      linear         endpoint-aligned linear blend up to input_length
    """

    method: str
    stored_length: int
    input_length: int
    window: int
    interpolation: str = "none"

    def __post_init__(self):
        if self.method not in SAMPLING_METHODS:
            raise PlanError(f"unknown sampling method {self.method!r}")
        if self.interpolation not in INTERPOLATION_MODES:
            raise PlanError(f"unknown interpolation mode {self.interpolation!r}")
        for name in ("stored_length", "input_length", "window"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise PlanError(f"{name} must be a positive int, got {v!r}")
        if self.window > self.stored_length:
            raise PlanError(
                f"window {self.window} exceeds stored_length {self.stored_length}"
            )
        if self.method == "naive" and self.window != self.stored_length:
            raise PlanError("naive sampling requires window == stored_length")
        if self.method == "segment" and self.stored_length % self.window != 0:
            raise PlanError(
                f"segment sampling needs stored_length divisible by window, "
                f"got {self.stored_length} / {self.window}"
            )
        if self.interpolation == "none" and self.window != self.input_length:
            raise PlanError(
                f"interpolation 'none' needs window == input_length, "
                f"got {self.window} != {self.input_length}"
            )
        if self.interpolation == "duplication":
            if self.input_length % self.window != 0:
                raise PlanError(
                    f"duplication needs input_length divisible by window, "
                    f"got {self.input_length} / {self.window}"
                )
        if self.interpolation == "linear":
            if self.window < 2 or self.input_length < 2:
                raise PlanError("linear interpolation needs window, input_length >= 2")

    def to_manifest_dict(self) -> dict:
        return {
            "method": self.method,
            "T_c": int(self.stored_length),
            "L": int(self.input_length),
            "W": int(self.window),
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_manifest_dict(cls, d: dict) -> "SamplingPlan":
        try:
            return cls(
                method=d["method"],
                stored_length=int(d["T_c"]),
                input_length=int(d["L"]),
                window=int(d["W"]),
                interpolation=d.get("interpolation", "none"),
            )
        except KeyError as e:
            raise PlanError(f"sampling plan dict missing key {e}") from e

    def with_stored_length(self, stored_length: int) -> "SamplingPlan":
        """Same recipe applied to a different stored length (real videos vary)."""
        window = self.window
        if self.method == "naive":
            window = stored_length
        return replace(self, stored_length=stored_length, window=window)


def default_plan(stored_length: int, input_length: int) -> SamplingPlan:
    """The standard recipe for a given storage/input length pair.

    Stored shorter than the input: keep all frames and upsample (duplication
    when the ratio is integral, linear otherwise). Stored longer: slide a
    window of the input length, no resampling.
    """
    if stored_length == input_length:
        return SamplingPlan("naive", stored_length, input_length, stored_length)
    if stored_length < input_length:
        interp = "duplication" if input_length % stored_length == 0 else "linear"
        return SamplingPlan("naive", stored_length, input_length, stored_length, interp)
    return SamplingPlan(
        "sliding_window", stored_length, input_length, input_length, "none"
    )


def sample_window(plan: SamplingPlan, rng: np.random.Generator,
                  length: int | None = None) -> tuple[int, int]:
    """Draw (start, window) for one clip.

    `length` overrides the stored length for real videos whose frame count
    differs from the plan's nominal one. naive always returns the full range;
    segment picks one of the length//window aligned segments uniformly;
    sliding_window picks any start in [0, length - window] uniformly.
    """
    if length is None:
        length = plan.stored_length
    if plan.method == "naive":
        return 0, length
    window = plan.window
    if window > length:
        raise PlanError(f"window {window} exceeds video length {length}")
    if plan.method == "segment":
        if length % window != 0:
            raise PlanError(
                f"segment sampling needs length divisible by window, "
                f"got {length} / {window}"
            )
        k = int(rng.integers(length // window))
        return k * window, window
    # sliding_window
    start = int(rng.integers(length - window + 1))
    return start, window


def interpolate(clip, input_length: int, mode: str):
    """Resample `clip` (time-major array or tensor) to `input_length` frames.

    none: identity, length must already match. duplication: frame i of the
    output copies input frame i // (L // W). linear: output frame i sits at
    source position p = i * (W - 1) / (L - 1) and blends floor/ceil neighbors
    with weights (1 - frac, frac); endpoints map exactly to endpoints.

    Works on numpy arrays and torch tensors alike; for torch inputs the result
    participates in autograd.
    """
    if mode not in INTERPOLATION_MODES:
        raise PlanError(f"unknown interpolation mode {mode!r}")
    window = clip.shape[0]
    if mode == "none":
        if window != input_length:
            raise PlanError(
                f"interpolation 'none' got length {window}, expected {input_length}"
            )
        return clip
    if mode == "duplication":
        if input_length % window != 0:
            raise PlanError(
                f"duplication needs input_length divisible by window, "
                f"got {input_length} / {window}"
            )
        factor = input_length // window
        idx = [i // factor for i in range(input_length)]
        return clip[idx]
    # linear
    if window < 2 or input_length < 2:
        raise PlanError("linear interpolation needs window, input_length >= 2")
    lo_idx, hi_idx, fracs = [], [], []
    for i in range(input_length):
        p = i * (window - 1) / (input_length - 1)
        lo = min(int(p), window - 2)
        lo_idx.append(lo)
        hi_idx.append(lo + 1)
        fracs.append(p - lo)
    lo_frames = clip[lo_idx]
    hi_frames = clip[hi_idx]
    if isinstance(clip, np.ndarray):
        w = np.asarray(fracs, dtype=clip.dtype if clip.dtype.kind == "f" else np.float64)
        w = w.reshape((input_length,) + (1,) * (clip.ndim - 1))
        return (1.0 - w) * lo_frames + w * hi_frames
    import torch

    w = torch.as_tensor(fracs, dtype=clip.dtype, device=clip.device)
    w = w.reshape((input_length,) + (1,) * (clip.dim() - 1))
    return (1.0 - w) * lo_frames + w * hi_frames


def extract_clip(frames, plan: SamplingPlan, rng: np.random.Generator):
    """Sample a window from `frames` per the plan and resample it to input length."""
    start, window = sample_window(plan, rng, length=frames.shape[0])
    clip = frames[start:start + window]
    if clip.shape[0] == plan.input_length and plan.interpolation == "none":
        return clip
    if plan.interpolation == "none":
        raise PlanError(
            f"window {clip.shape[0]} != input_length {plan.input_length} "
            "with interpolation 'none'"
        )
    return interpolate(clip, plan.input_length, plan.interpolation)


def duplication_pad(frames, min_length: int):
    """Repeat frames (duplication upsample) until at least `min_length` long."""
    t = frames.shape[0]
    if t >= min_length:
        return frames
    factor = ceil(min_length / t)
    return interpolate(frames, factor * t, "duplication")


def center_clip(frames, input_length: int):
    """Deterministic evaluation clip: center window, duplication-pad if short."""
    frames = duplication_pad(frames, input_length)
    start = (frames.shape[0] - input_length) // 2
    return frames[start:start + input_length]


def canonical_input_clip(frames, input_length: int):
    """The fixed, rng-free view of a video at the model's input length.

    Shorter videos are upsampled per the default plan (duplication when the
    ratio is integral, linear otherwise); longer ones contribute their center
    window. Used wherever one deterministic clip must represent a video:
    teacher scoring, feature extraction, fixed soft labels.
    """
    t = frames.shape[0]
    if t == input_length:
        return frames
    if t < input_length:
        mode = "duplication" if input_length % t == 0 else "linear"
        return interpolate(frames, input_length, mode)
    return center_clip(frames, input_length)


@dataclass(frozen=True)
class CompressionReport:
    """Instance, temporal, and total compression of a condensed set.

    instance_ratio  condensed videos / real videos
    temporal_ratio  condensed frames per video / mean real frames per video
    total_ratio     product of the two = stored frames / expected real frames
    """

    num_real: int
    num_condensed: int
    real_mean_frames: float
    condensed_frames: int
    instance_ratio: float
    temporal_ratio: float
    total_ratio: float

    @property
    def total_permille(self) -> float:
        return 1000.0 * self.total_ratio


def compression_report(num_real: int, num_condensed: int,
                       real_mean_frames: float,
                       condensed_frames: int) -> CompressionReport:
    if num_real < 1 or num_condensed < 1:
        raise PlanError("video counts must be positive")
    if real_mean_frames <= 0 or condensed_frames < 1:
        raise PlanError("frame counts must be positive")
    inst = num_condensed / num_real
    temp = condensed_frames / real_mean_frames
    return CompressionReport(
        num_real=num_real,
        num_condensed=num_condensed,
        real_mean_frames=float(real_mean_frames),
        condensed_frames=condensed_frames,
        instance_ratio=inst,
        temporal_ratio=temp,
        total_ratio=inst * temp,
    )
