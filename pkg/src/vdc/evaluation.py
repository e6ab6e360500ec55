"""Unified evaluation protocol: train a fresh network on a condensed set.

Every condensed set, whatever produced it, is scored the same way: a freshly
initialized network trains on the set under a fixed recipe (decoupled
weight-decay Adam, cosine schedule, clip sampling through the set's own plan,
light augmentation) and reports validation accuracy. Labels come in three
flavors: hard class indices, soft teacher logits cached once per item on its
canonical clip, or per-view teacher logits recomputed on each augmented batch.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import CondensedSet, VideoDataset
from .errors import CompatibilityError, ConfigError, EvalError
from .models import ModelSpec, build_model, clips_to_tensor
from .temporal import canonical_input_clip, extract_clip
from .trajectory import Teacher

LABELINGS = ("hard", "soft", "multi_sl")
LOSSES = ("mse_gt", "kl")
METRICS = ("top1", "top5")
_EVAL_TAG = 0x45564C  # rng stream domain


@dataclass(frozen=True)
class EvalConfig:
    """Fixed training recipe applied to every condensed set."""

    labeling: str = "soft"
    loss: str = "mse_gt"
    cutmix: bool = False
    base_batch: int = 10
    epochs: int = 300
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    schedule: str = "cosine"
    augmentation: tuple = ("resized_crop", "horizontal_flip")
    crop_scale: tuple = (0.5, 1.0)
    mse_gt_ce_weight: float = 0.1
    teacher: Optional[str] = None
    seeds: tuple = (0,)
    metric: str = "top1"

    def __post_init__(self):
        if self.labeling not in LABELINGS:
            raise ConfigError(f"labeling must be one of {LABELINGS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be cosine or constant")
        if self.base_batch < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("base_batch >= 1, epochs >= 0, lr > 0 required")
        unknown = set(self.augmentation) - {"resized_crop", "horizontal_flip"}
        if unknown:
            raise ConfigError(f"unknown augmentations {sorted(unknown)}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not (0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0):
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        object.__setattr__(self, "augmentation", tuple(self.augmentation))
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def needs_teacher(self) -> bool:
        return self.labeling in ("soft", "multi_sl")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("betas", "augmentation", "crop_scale", "seeds"):
            d[k] = list(d[k])
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    """Per-seed accuracies of one condensed set under one recipe."""

    seeds: tuple
    accuracies: tuple
    mean: float
    std: float
    metric: str
    arch: str
    spec_hash: str
    config_fingerprint: str
    provenance: dict
    wall_time: float

    def __post_init__(self):
        if len(self.seeds) != len(self.accuracies):
            raise ConfigError("one accuracy per seed required")
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"accuracy {a} outside [0, 1]")
        want = float(np.mean(self.accuracies))
        if abs(self.mean - want) > 1e-12:
            raise ConfigError("mean must be the arithmetic mean of the seeds")

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "accuracies": list(self.accuracies),
            "mean": self.mean,
            "std": self.std,
            "metric": self.metric,
            "arch": self.arch,
            "spec_hash": self.spec_hash,
            "config_fingerprint": self.config_fingerprint,
            "provenance": self.provenance,
            "wall_time": self.wall_time,
        }


# ---------------------------------------------------------------------------
# labels and losses


def make_labels(mode: str, teacher: Optional[Teacher], item, view,
                num_classes: Optional[int] = None) -> torch.Tensor:
    """Label vector for one item: one-hot, canonical-clip logits, or
    logits on the exact augmented view `view` ([C, T, H, W])."""
    if mode == "hard":
        if num_classes is None:
            if teacher is None:
                raise ConfigError("one-hot labels need num_classes or a teacher")
            num_classes = teacher.spec.num_classes
        return F.one_hot(torch.tensor(item.label), num_classes).float()
    if teacher is None:
        raise ConfigError(f"labeling={mode!r} requires a teacher network")
    if mode == "soft":
        clip = canonical_input_clip(item.frames, teacher.spec.input_size[0])
        return teacher.logits(clips_to_tensor([clip]))[0]
    if mode == "multi_sl":
        return teacher.logits(view.unsqueeze(0))[0]
    raise ConfigError(f"unknown labeling {mode!r}")


def eval_loss(mode: str, student_logits: torch.Tensor,
              label_vec: torch.Tensor, hard_labels: torch.Tensor,
              ce_weight: float = 0.1) -> torch.Tensor:
    """Regression-plus-ground-truth or distribution-matching training loss."""
    if student_logits.shape != label_vec.shape:
        raise ConfigError(
            f"student logits {tuple(student_logits.shape)} vs label vector "
            f"{tuple(label_vec.shape)}")
    if mode == "mse_gt":
        return F.mse_loss(student_logits, label_vec) + \
            ce_weight * F.cross_entropy(student_logits, hard_labels)
    if mode == "kl":
        return F.kl_div(F.log_softmax(student_logits, dim=1),
                        F.softmax(label_vec, dim=1), reduction="batchmean")
    raise ConfigError(f"unknown loss {mode!r}")


# ---------------------------------------------------------------------------
# augmentation


def _resized_crop(clip: torch.Tensor, rng: np.random.Generator,
                  scale: tuple) -> torch.Tensor:
    """Random square crop of relative area in `scale`, resized back.

    Same crop for every frame of the clip, so motion stays coherent.
    """
    c, t, h, w = clip.shape
    area = rng.uniform(scale[0], scale[1])
    side_h = max(1, int(round(h * np.sqrt(area))))
    side_w = max(1, int(round(w * np.sqrt(area))))
    y0 = int(rng.integers(0, h - side_h + 1))
    x0 = int(rng.integers(0, w - side_w + 1))
    patch = clip[:, :, y0:y0 + side_h, x0:x0 + side_w]
    if (side_h, side_w) == (h, w):
        return patch
    flat = patch.reshape(1, c * t, side_h, side_w)
    out = F.interpolate(flat, size=(h, w), mode="bilinear",
                        align_corners=False)
    return out.reshape(c, t, h, w)


def augment_batch(batch: torch.Tensor, cfg: EvalConfig,
                  rng: np.random.Generator) -> torch.Tensor:
    """Apply the configured augmentations per clip. [B, C, T, H, W] in/out."""
    clips = []
    for i in range(batch.shape[0]):
        clip = batch[i]
        if "resized_crop" in cfg.augmentation:
            clip = _resized_crop(clip, rng, cfg.crop_scale)
        if "horizontal_flip" in cfg.augmentation and rng.random() < 0.5:
            clip = clip.flip(-1)
        clips.append(clip)
    return torch.stack(clips)


def cutmix_batch(batch: torch.Tensor, rng: np.random.Generator):
    """Pairwise space-time box mixing.

    Returns (mixed batch, partner indices, own-label weights). The weight is
    the kept fraction of the clip volume; losses mix with the same weight.
    """
    b, _, t, h, w = batch.shape
    perm = rng.permutation(b)
    lam = float(rng.uniform(0.0, 1.0))
    cut = (1.0 - lam) ** (1.0 / 3.0)  # per-axis fraction of the cut box
    dt, dh, dw = (max(1, int(round(cut * t))), max(1, int(round(cut * h))),
                  max(1, int(round(cut * w))))
    t0 = int(rng.integers(0, t - dt + 1))
    y0 = int(rng.integers(0, h - dh + 1))
    x0 = int(rng.integers(0, w - dw + 1))
    mixed = batch.clone()
    mixed[:, :, t0:t0 + dt, y0:y0 + dh, x0:x0 + dw] = \
        batch[perm][:, :, t0:t0 + dt, y0:y0 + dh, x0:x0 + dw]
    kept = 1.0 - (dt * dh * dw) / (t * h * w)
    return mixed, torch.as_tensor(perm), kept


# ---------------------------------------------------------------------------
# training


def _check_teacher(cfg: EvalConfig, teacher: Optional[Teacher]):
    if cfg.needs_teacher() and teacher is None:
        raise ConfigError(f"labeling={cfg.labeling!r} requires a teacher")
    if teacher is not None and cfg.teacher is not None \
            and teacher.id != cfg.teacher:
        raise CompatibilityError(
            f"teacher {teacher.id} does not match configured {cfg.teacher}")


def _soft_label_table(condensed: CondensedSet, teacher: Teacher):
    """Teacher logits on each item's canonical clip, computed once."""
    length = teacher.spec.input_size[0]
    clips = [canonical_input_clip(it.frames, length) for it in condensed]
    table = teacher.logits(clips_to_tensor(clips))
    checksum = hashlib.sha256(
        table.numpy().astype("<f4").tobytes()).hexdigest()[:16]
    return table, checksum


def _accuracy(model, val: VideoDataset, input_length: int, metric: str,
              chunk: int = 64) -> float:
    model.eval()
    hits, total = 0, 0
    for lo in range(0, len(val), chunk):
        part = val.items[lo:lo + chunk]
        clips = [canonical_input_clip(it.frames, input_length) for it in part]
        with torch.no_grad():
            logits = model(clips_to_tensor(clips))
        labels = torch.tensor([it.label for it in part])
        if metric == "top1":
            hits += int((logits.argmax(dim=1) == labels).sum())
        else:
            top = logits.topk(5, dim=1).indices
            hits += int((top == labels[:, None]).any(dim=1).sum())
        total += len(part)
    return hits / total


def _train_one_seed(condensed: CondensedSet, spec: ModelSpec, cfg: EvalConfig,
                    val: VideoDataset, teacher: Optional[Teacher],
                    seed: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_TAG]))
    model = build_model(spec, seed=seed)
    batch_size = cfg.base_batch * condensed.ipc  # exact, by protocol
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    sched = None
    if cfg.schedule == "cosine" and cfg.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=cfg.epochs)

    soft_table = None
    if cfg.labeling == "soft":
        soft_table, before = _soft_label_table(condensed, teacher)

    # copy: arrays read back from disk may be non-writable views
    frames = [torch.from_numpy(np.array(it.frames)) for it in condensed]
    hard = torch.tensor([it.label for it in condensed])
    plan = condensed.plan

    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            clips = [extract_clip(frames[i], plan, rng) for i in idx]
            batch = torch.stack(clips).permute(0, 2, 1, 3, 4)
            batch = augment_batch(batch, cfg, rng)
            targets = hard[idx]

            mix = None
            if cfg.cutmix:
                batch, partners, kept = cutmix_batch(batch, rng)
                mix = (partners, kept)

            if cfg.labeling == "multi_sl":
                labels = teacher.logits(batch)
            elif cfg.labeling == "soft":
                labels = soft_table[torch.as_tensor(idx)]
            else:
                labels = None

            logits = model(batch)
            if labels is None:
                loss = F.cross_entropy(logits, targets)
                if mix is not None:
                    partners, kept = mix
                    loss = kept * loss + (1 - kept) * F.cross_entropy(
                        logits, targets[partners])
            else:
                loss = eval_loss(cfg.loss, logits, labels, targets,
                                 cfg.mse_gt_ce_weight)
                if mix is not None:
                    partners, kept = mix
                    # per-view labels already describe the mixed clip
                    other = labels if cfg.labeling == "multi_sl" \
                        else labels[partners]
                    loss = kept * loss + (1 - kept) * eval_loss(
                        cfg.loss, logits, other, targets[partners],
                        cfg.mse_gt_ce_weight)
            if not torch.isfinite(loss):
                raise EvalError(
                    f"non-finite loss at seed {seed}, epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        if sched is not None:
            sched.step()

    if cfg.labeling == "soft":
        # labels must never drift during training
        _, after = _soft_label_table(condensed, teacher)
        if after != before:
            raise EvalError(f"soft-label table changed during seed {seed}")

    return _accuracy(model, val, plan.input_length, cfg.metric)


def evaluate(condensed: CondensedSet, spec: ModelSpec, cfg: EvalConfig,
             val: VideoDataset, teacher: Optional[Teacher] = None) -> EvalReport:
    """Train one fresh network per seed and report validation accuracy."""
    _check_teacher(cfg, teacher)
    if val.num_classes != condensed.num_classes:
        raise CompatibilityError(
            f"condensed set has {condensed.num_classes} classes, validation "
            f"set has {val.num_classes}")
    if spec.num_classes != condensed.num_classes:
        raise CompatibilityError(
            f"model emits {spec.num_classes} classes, set has "
            f"{condensed.num_classes}")
    if cfg.metric == "top5" and condensed.num_classes < 10:
        raise ConfigError("top5 needs at least 10 classes")
    if spec.input_size[0] != condensed.plan.input_length:
        raise CompatibilityError(
            f"model wants {spec.input_size[0]}-frame clips, plan yields "
            f"{condensed.plan.input_length}")

    start = time.time()
    accs = tuple(_train_one_seed(condensed, spec, cfg, val, teacher, s)
                 for s in cfg.seeds)
    fingerprint = hashlib.sha256(
        (cfg.fingerprint() + spec.hash()).encode()).hexdigest()[:16]
    return EvalReport(
        seeds=cfg.seeds, accuracies=accs,
        mean=float(np.mean(accs)), std=float(np.std(accs)),
        metric=cfg.metric, arch=spec.arch, spec_hash=spec.hash(),
        config_fingerprint=fingerprint,
        provenance=dict(condensed.provenance),
        wall_time=time.time() - start,
    )


def cross_arch_evaluate(condensed: CondensedSet, specs: Sequence[ModelSpec],
                        cfg: EvalConfig, val: VideoDataset,
                        teacher: Optional[Teacher] = None) -> list:
    """Evaluate the same set against several architectures independently."""
    if not specs:
        raise ConfigError("need at least one model spec")
    return [evaluate(condensed, spec, cfg, val, teacher) for spec in specs]
