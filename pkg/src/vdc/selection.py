"""Sample-selection condensation: Random, Herding, and realism-ranked clips.

All three selectors cut real windows out of real videos and emit a condensed
set with hard labels; no pixel is ever optimized. Randomness is scoped per
video via (seed, crc32(id)) streams, so scores and candidate windows do not
depend on dataset order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .dataio import CondensedSet, VideoDataset, VideoItem
from .errors import SelectionError, ConfigError
from .models import clips_to_tensor
from .temporal import (
    SamplingPlan,
    canonical_input_clip,
    default_plan,
    duplication_pad,
)
from .trajectory import Teacher


@dataclass(frozen=True)
class ScoredClip:
    """One candidate window of one source video with its realism score."""

    source_id: str
    start: int
    window: int
    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise SelectionError(f"non-finite score for clip of {self.source_id!r}")
        if self.start < 0 or self.window < 1:
            raise SelectionError(f"invalid window for {self.source_id!r}")


def _video_rng(seed: int, video_id: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(video_id.encode())]))


def _class_groups(dataset: VideoDataset, needed: int):
    groups = dataset.by_class()
    for k, members in groups.items():
        if len(members) < needed:
            raise SelectionError(
                f"class {dataset.class_names[k]!r} has {len(members)} videos, "
                f"need {needed}"
            )
    return groups


def _cut_window(frames: np.ndarray, stored_length: int, start: int) -> np.ndarray:
    padded = duplication_pad(frames, stored_length)
    return np.ascontiguousarray(padded[start:start + stored_length])


def _emit(items, dataset, ipc, stored_length, input_length, provenance):
    plan = default_plan(stored_length, input_length)
    return CondensedSet(
        items=items, class_names=list(dataset.class_names), ipc=ipc,
        plan=plan, labeling="hard", provenance=provenance,
    )


def select_random(dataset: VideoDataset, ipc: int, stored_length: int,
                  seed: int, input_length: int | None = None) -> CondensedSet:
    """Uniform per-class choice without replacement; one uniform window each."""
    if ipc < 1 or stored_length < 1:
        raise ConfigError("ipc and stored_length must be positive")
    groups = _class_groups(dataset, ipc)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x52414E44]))
    items = []
    for k in range(dataset.num_classes):
        members = groups[k]
        picks = rng.choice(len(members), size=ipc, replace=False)
        for i in sorted(picks):
            src = members[i]
            padded_len = max(src.num_frames, stored_length)
            start = int(rng.integers(padded_len - stored_length + 1))
            items.append(VideoItem(
                id=src.id, frames=_cut_window(src.frames, stored_length, start),
                label=src.label, meta={"source": src.id, "start": start},
            ))
    return _emit(items, dataset, ipc, stored_length,
                 input_length or stored_length,
                 {"method": "random", "seed": seed})


# ---------------------------------------------------------------------------
# herding


def herding_order(features: np.ndarray, count: int) -> list:
    """Greedy picks: at each step take the index whose inclusion brings the
    running mean of selected features closest (L2) to the full mean. Ties go
    to the lower index."""
    n = len(features)
    if count > n:
        raise SelectionError(f"cannot pick {count} of {n} candidates")
    mu = features.mean(axis=0)
    chosen, remaining = [], list(range(n))
    total = np.zeros_like(mu)
    for _ in range(count):
        best_i, best_d = None, None
        for i in remaining:
            d = float(np.linalg.norm(mu - (total + features[i]) / (len(chosen) + 1)))
            if best_d is None or d < best_d:
                best_i, best_d = i, d
        chosen.append(best_i)
        remaining.remove(best_i)
        total += features[best_i]
    return chosen


def _teacher_batched(fn, clips, chunk=64):
    outs = []
    for lo in range(0, len(clips), chunk):
        outs.append(fn(clips_to_tensor(clips[lo:lo + chunk])))
    return torch.cat(outs)


def select_herding(dataset: VideoDataset, ipc: int, stored_length: int,
                   teacher: Teacher) -> CondensedSet:
    """Per class, greedily match the class-mean feature of the teacher.

    Features come from each video's canonical clip; the emitted item is the
    center window, so the whole procedure is deterministic given the teacher.
    """
    if ipc < 1 or stored_length < 1:
        raise ConfigError("ipc and stored_length must be positive")
    groups = _class_groups(dataset, ipc)
    input_length = teacher.spec.input_size[0]
    items = []
    for k in range(dataset.num_classes):
        members = groups[k]
        views = [canonical_input_clip(it.frames, input_length) for it in members]
        feats = _teacher_batched(teacher.features, views).numpy().astype(np.float64)
        for i in herding_order(feats, ipc):
            src = members[i]
            padded_len = max(src.num_frames, stored_length)
            start = (padded_len - stored_length) // 2
            items.append(VideoItem(
                id=src.id, frames=_cut_window(src.frames, stored_length, start),
                label=src.label, meta={"source": src.id, "start": start},
            ))
    return _emit(items, dataset, ipc, stored_length, input_length,
                 {"method": "herding", "teacher": teacher.id})


# ---------------------------------------------------------------------------
# realism-ranked selection


def score_clips(dataset: VideoDataset, teacher: Teacher, stored_length: int,
                clips_per_video: int, seed: int) -> dict:
    """Score candidate windows of every video; return {id: best ScoredClip}.

    Realism of a clip is the negative teacher cross-entropy against the hard
    label. When a video has at most clips_per_video admissible windows they
    are all scored; otherwise that many are sampled without replacement from
    the video's own rng stream, so scores are independent of dataset order.
    """
    input_length = teacher.spec.input_size[0]
    best = {}
    pending, owners = [], []
    for it in dataset:
        padded = duplication_pad(it.frames, stored_length)
        starts = np.arange(padded.shape[0] - stored_length + 1)
        if len(starts) > clips_per_video:
            rng = _video_rng(seed, it.id)
            starts = np.sort(rng.choice(starts, size=clips_per_video,
                                        replace=False))
        for s in starts:
            clip = padded[s:s + stored_length]
            pending.append(canonical_input_clip(clip, input_length))
            owners.append((it, int(s)))
    logits = _teacher_batched(teacher.logits, pending)
    labels = torch.tensor([it.label for it, _ in owners])
    losses = torch.nn.functional.cross_entropy(logits, labels,
                                               reduction="none").numpy()
    for (it, s), loss in zip(owners, losses):
        cand = ScoredClip(source_id=it.id, start=s, window=stored_length,
                          score=-float(loss), label=it.label)
        cur = best.get(it.id)
        if cur is None or cand.score > cur.score:
            best[it.id] = cand
    return best


def spatial_concat(clips: list) -> np.ndarray:
    """Tile g*g clips into one clip on a g x g spatial grid.

    Each contributor is average-pool downscaled by g per spatial axis first,
    so the composite keeps the original frame size.
    """
    n = len(clips)
    g = int(round(n ** 0.5))
    if g * g != n:
        raise ConfigError(f"concat factor {n} is not a perfect square")
    if g == 1:
        return clips[0]
    t, c, h, w = clips[0].shape
    if h % g or w % g:
        raise ConfigError(f"frame size {h}x{w} not divisible by grid {g}")
    out = np.empty((t, c, h, w), dtype=np.float32)
    hs, ws = h // g, w // g
    for i, clip in enumerate(clips):
        small = clip.reshape(t, c, hs, g, ws, g).mean(axis=(3, 5))
        r, col = divmod(i, g)
        out[:, :, r * hs:(r + 1) * hs, col * ws:(col + 1) * ws] = small
    return out


def select_rded(dataset: VideoDataset, ipc: int, stored_length: int,
                teacher: Teacher, clips_per_video: int = 10, seed: int = 0,
                concat_factor: int = 1) -> CondensedSet:
    """Keep each video's most realistic window, then the top videos per class.

    With concat_factor n > 1, the top ipc*n videos per class contribute and
    consecutive groups of n clips tile into one composite item (grid of
    sqrt(n)); n=1 is the identity and the default operating point.
    """
    if ipc < 1 or stored_length < 1 or clips_per_video < 1:
        raise ConfigError("ipc, stored_length, clips_per_video must be positive")
    groups = _class_groups(dataset, ipc * concat_factor)
    best = score_clips(dataset, teacher, stored_length, clips_per_video, seed)
    input_length = teacher.spec.input_size[0]
    items, kept_scores = [], []
    for k in range(dataset.num_classes):
        ranked = sorted((best[it.id] for it in groups[k]),
                        key=lambda c: (-c.score, c.source_id))
        take = ranked[:ipc * concat_factor]
        frames_by_id = {it.id: it.frames for it in groups[k]}
        for j in range(ipc):
            group = take[j * concat_factor:(j + 1) * concat_factor]
            clips = [_cut_window(frames_by_id[c.source_id], stored_length,
                                 c.start) for c in group]
            composite = spatial_concat(clips)
            items.append(VideoItem(
                id=group[0].source_id, frames=composite, label=k,
                meta={"sources": [c.source_id for c in group],
                      "starts": [c.start for c in group],
                      "scores": [round(c.score, 6) for c in group]},
            ))
            kept_scores.extend(c.score for c in group)
    return _emit(items, dataset, ipc, stored_length, input_length,
                 {"method": "rded", "seed": seed, "teacher": teacher.id,
                  "clips_per_video": clips_per_video,
                  "concat_factor": concat_factor,
                  "mean_score": float(np.mean(kept_scores))})
