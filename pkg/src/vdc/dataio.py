"""Video items, datasets, condensed sets, and their on-disk format.

Frames live in memory as float32 arrays shaped [T, C, H, W] with pixel values
in [0, 1]. On disk a dataset is a directory: manifest.json plus one binary
file per video (16-byte header, then raw little-endian float32 frames). A
condensed set shares the layout and adds an extra manifest block (ipc,
sampling plan, labeling hint, provenance), so selection outputs and
distillation outputs are interchangeable downstream.

The synthetic generator produces the micro-benchmark used throughout the
tests: one moving Gaussian blob per video on a toroidal canvas, class
identity carried by motion direction and speed, everything else (start,
radius, color, background, amplitude, noise level) a nuisance drawn per
video. It is small enough to brute-force yet hard enough that selection
and labeling choices measurably move the needle.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ConfigError
from .temporal import SamplingPlan

MAGIC = b"VDC1"
HEADER = struct.Struct("<4sIII")  # magic, T, C*H*W, reserved
MANIFEST_FORMAT = "vdc-dataset-v1"


def _check_frames(frames: np.ndarray, what: str) -> np.ndarray:
    if not isinstance(frames, np.ndarray) or frames.ndim != 4:
        raise FormatError(f"{what}: frames must be a [T, C, H, W] ndarray")
    if frames.dtype != np.float32:
        raise FormatError(f"{what}: frames must be float32, got {frames.dtype}")
    if frames.size == 0:
        raise FormatError(f"{what}: empty frame array")
    if not np.isfinite(frames).all():
        raise FormatError(f"{what}: non-finite pixel values")
    lo, hi = float(frames.min()), float(frames.max())
    if lo < 0.0 or hi > 1.0:
        raise FormatError(f"{what}: pixels outside [0, 1] (min {lo:.4g}, max {hi:.4g})")
    return np.ascontiguousarray(frames)


@dataclass
class VideoItem:
    """One video: frames [T, C, H, W] float32 in [0, 1], a hard label, and
    optionally a soft label (float64 probabilities or logits, length = classes)."""

    id: str
    frames: np.ndarray
    label: int
    soft_label: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise FormatError("video id must be a non-empty string")
        self.frames = _check_frames(self.frames, f"item {self.id!r}")
        self.label = int(self.label)
        if self.label < 0:
            raise FormatError(f"item {self.id!r}: negative label")
        if self.soft_label is not None:
            sl = np.asarray(self.soft_label, dtype=np.float64)
            if sl.ndim != 1 or not np.isfinite(sl).all():
                raise FormatError(f"item {self.id!r}: malformed soft label")
            self.soft_label = sl

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def payload_bytes(self) -> bytes:
        return self.frames.astype("<f4", copy=False).tobytes(order="C")

    def checksum(self) -> str:
        return f"{zlib.crc32(self.payload_bytes()) & 0xFFFFFFFF:08x}"


def _validate_items(items, class_names):
    if not items:
        raise FormatError("dataset has no items")
    seen = set()
    shape = items[0].frame_shape()
    for it in items:
        if it.id in seen:
            raise FormatError(f"duplicate video id {it.id!r}")
        seen.add(it.id)
        if it.label >= len(class_names):
            raise FormatError(
                f"item {it.id!r}: label {it.label} out of range "
                f"for {len(class_names)} classes"
            )
        if it.frame_shape() != shape:
            raise FormatError(
                f"item {it.id!r}: frame shape {it.frame_shape()} != {shape}"
            )
        if it.soft_label is not None and it.soft_label.shape != (len(class_names),):
            raise FormatError(
                f"item {it.id!r}: soft label length {it.soft_label.shape} "
                f"!= class count {len(class_names)}"
            )


@dataclass
class VideoDataset:
    """An ordered collection of VideoItems with shared class names."""

    items: list
    class_names: list

    def __post_init__(self):
        self.class_names = [str(c) for c in self.class_names]
        _validate_items(self.items, self.class_names)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i) -> VideoItem:
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def by_class(self) -> dict:
        out = {k: [] for k in range(self.num_classes)}
        for it in self.items:
            out[it.label].append(it)
        return out

    def mean_frames(self) -> float:
        return float(np.mean([it.num_frames for it in self.items]))

    def fingerprint(self) -> str:
        """Content hash covering ids, labels, pixels, and soft labels."""
        h = hashlib.sha256()
        h.update(json.dumps(self.class_names).encode())
        for it in self.items:
            h.update(it.id.encode())
            h.update(struct.pack("<iI", it.label, it.num_frames))
            h.update(it.payload_bytes())
            if it.soft_label is not None:
                h.update(it.soft_label.astype("<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class DatasetStats:
    """Corpus-level summary: counts plus frame-length statistics."""

    num_videos: int
    num_classes: int
    mean_frames: float
    median_frames: float
    per_class_mean: float

    def to_dict(self) -> dict:
        return {
            "num_videos": self.num_videos,
            "num_classes": self.num_classes,
            "mean_frames": self.mean_frames,
            "median_frames": self.median_frames,
            "per_class_mean": self.per_class_mean,
        }


def compute_stats(dataset) -> DatasetStats:
    """Summary statistics of a dataset; invariant to item order."""
    if len(dataset) == 0:
        raise FormatError("cannot summarize an empty dataset")
    lengths = [it.num_frames for it in dataset]
    return DatasetStats(
        num_videos=len(dataset),
        num_classes=dataset.num_classes,
        mean_frames=float(np.mean(lengths)),
        median_frames=float(np.median(lengths)),
        per_class_mean=len(dataset) / dataset.num_classes,
    )


@dataclass
class CondensedSet(VideoDataset):
    """A small training set produced by selection or distillation.

    ipc is items per class and must hold exactly for every class. The plan
    says how training clips are drawn from the stored frames; labeling is the
    mode the producer intended ("hard", "soft", "multi_sl"); provenance is a
    free-form JSON-safe record of how the set was made.
    """

    ipc: int = 1
    plan: SamplingPlan = None
    labeling: str = "hard"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        if self.plan is None:
            raise ConfigError("condensed set needs a sampling plan")
        if self.labeling not in ("hard", "soft", "multi_sl"):
            raise ConfigError(f"unknown labeling mode {self.labeling!r}")
        counts = {k: 0 for k in range(self.num_classes)}
        for it in self.items:
            counts[it.label] += 1
        bad = {k: c for k, c in counts.items() if c != self.ipc}
        if bad:
            raise FormatError(
                f"condensed set must hold exactly ipc={self.ipc} items per class, "
                f"got {bad}"
            )
        for it in self.items:
            if it.num_frames != self.plan.stored_length:
                raise FormatError(
                    f"item {it.id!r}: {it.num_frames} frames != plan stored_length "
                    f"{self.plan.stored_length}"
                )


# ---------------------------------------------------------------------------
# synthetic micro benchmark


def _render_blob_video(rng, num_frames, height, width, angle, speed):
    """One video: a Gaussian blob drifting across a toroidal canvas."""
    radius = rng.uniform(1.6, 2.6) * min(height, width) / 16.0
    amp = rng.uniform(0.45, 1.0)
    color = rng.uniform(0.4, 1.0, size=3)
    bg = rng.uniform(0.05, 0.25)
    noise = rng.uniform(0.02, 0.12)
    y0 = rng.uniform(0, height)
    x0 = rng.uniform(0, width)
    vy = speed * math.sin(angle)
    vx = speed * math.cos(angle)

    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    frames = np.empty((num_frames, 3, height, width), dtype=np.float32)
    for t in range(num_frames):
        py = (y0 + vy * t) % height
        px = (x0 + vx * t) % width
        dy = np.abs(ys - py)
        dy = np.minimum(dy, height - dy)
        dx = np.abs(xs - px)
        dx = np.minimum(dx, width - dx)
        g = np.exp(-(dy * dy + dx * dx) / (2.0 * radius * radius))
        for c in range(3):
            plane = bg + amp * color[c] * g + rng.normal(0.0, noise, (height, width))
            frames[t, c] = np.clip(plane, 0.0, 1.0)
    detail = {
        "radius": round(radius, 4), "amp": round(amp, 4),
        "bg": round(bg, 4), "noise": round(noise, 4),
        "start": [round(y0, 3), round(x0, 3)],
    }
    return frames, detail


def class_motion(k: int, num_classes: int, height: int = 16) -> tuple[float, float]:
    """Angle (radians) and speed (px/frame) that define class k's motion."""
    angle = 2.0 * math.pi * k / num_classes
    speed = (1.2 + 0.6 * (k % 2)) * height / 16.0
    return angle, speed


def make_micro_dataset(num_classes: int = 4, videos_per_class: int = 20,
                       num_frames: int = 16, height: int = 16, width: int = 16,
                       seed: int = 0, id_prefix: str = "v") -> VideoDataset:
    """Generate the moving-blob benchmark.

    Class identity is (direction, speed tier); everything else varies per
    video. Deterministic in all arguments; different id_prefix or seed gives
    disjoint content (use for train/val splits).
    """
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, num_classes,
                                                        videos_per_class,
                                                        num_frames, height, width]))
    items = []
    for k in range(num_classes):
        angle, speed = class_motion(k, num_classes, height)
        for i in range(videos_per_class):
            frames, detail = _render_blob_video(rng, num_frames, height, width,
                                                angle, speed)
            detail["angle"] = round(angle, 4)
            detail["speed"] = round(speed, 4)
            items.append(VideoItem(
                id=f"{id_prefix}{k:02d}_{i:03d}", frames=frames, label=k,
                meta=detail,
            ))
    names = [f"motion_{k:02d}" for k in range(num_classes)]
    return VideoDataset(items=items, class_names=names)


# ---------------------------------------------------------------------------
# on-disk format


def _safe_name(vid: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", vid)


def _write_video_file(path: Path, item: VideoItem) -> str:
    payload = item.payload_bytes()
    t = item.num_frames
    chw = int(np.prod(item.frame_shape()))
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, t, chw, 0))
        f.write(payload)
    return f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}"


def _read_video_file(path: Path, shape, expect_t: int, expect_crc: str) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, t, chw, reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if t != expect_t or chw != int(np.prod(shape)) or reserved != 0:
        raise FormatError(f"{path}: header disagrees with manifest")
    payload = data[HEADER.size:]
    if len(payload) != 4 * t * chw:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, "
                          f"expected {4 * t * chw}")
    crc = f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}"
    if crc != expect_crc:
        raise FormatError(f"{path}: checksum mismatch ({crc} != {expect_crc})")
    frames = np.frombuffer(payload, dtype="<f4").reshape((t,) + tuple(shape))
    return np.ascontiguousarray(frames).astype(np.float32, copy=False)


def write_dataset(dataset: VideoDataset, path) -> Path:
    """Write a dataset (or condensed set) directory; returns the path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    shape = dataset.items[0].frame_shape()
    for i, it in enumerate(dataset.items):
        fname = f"{i:05d}_{_safe_name(it.id)}.bin"
        crc = _write_video_file(root / fname, it)
        entry = {
            "id": it.id, "file": fname, "label": it.label,
            "frames": it.num_frames, "checksum": crc,
        }
        if it.soft_label is not None:
            entry["soft_label"] = [float(x) for x in it.soft_label]
        if it.meta:
            entry["meta"] = it.meta
        entries.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "kind": "condensed" if isinstance(dataset, CondensedSet) else "dataset",
        "class_names": dataset.class_names,
        "frame_shape": list(shape),
        "items": entries,
    }
    if isinstance(dataset, CondensedSet):
        manifest["condensed"] = {
            "ipc": dataset.ipc,
            "labeling": dataset.labeling,
            "plan": dataset.plan.to_manifest_dict(),
            "provenance": dataset.provenance,
        }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return root


def read_dataset(path):
    """Read a dataset directory; returns CondensedSet when the manifest says so."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"{mpath}: missing manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{mpath}: unknown format {manifest.get('format')!r}")
    shape = tuple(manifest["frame_shape"])
    items = []
    for entry in manifest["items"]:
        frames = _read_video_file(root / entry["file"], shape,
                                  entry["frames"], entry["checksum"])
        sl = entry.get("soft_label")
        items.append(VideoItem(
            id=entry["id"], frames=frames, label=entry["label"],
            soft_label=None if sl is None else np.asarray(sl, dtype=np.float64),
            meta=entry.get("meta", {}),
        ))
    names = manifest["class_names"]
    if manifest.get("kind") == "condensed":
        block = manifest.get("condensed")
        if not block:
            raise FormatError(f"{mpath}: kind is 'condensed' but block missing")
        return CondensedSet(
            items=items, class_names=names, ipc=int(block["ipc"]),
            plan=SamplingPlan.from_manifest_dict(block["plan"]),
            labeling=block["labeling"], provenance=block.get("provenance", {}),
        )
    return VideoDataset(items=items, class_names=names)
