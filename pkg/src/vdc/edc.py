"""Statistical-matching distillation over space-time activations.

Real clips stream once through each trained network; channel-wise mean and
variance of every normalization-layer output (plus the pre-head pooled
feature) become matching targets. Synthetic pixels are then optimized so a
batch of synthetic clips reproduces those statistics, with an L2 norm on the
mean gap and on the variance gap per matched layer, plus a teacher
cross-entropy term that keeps clips class-consistent.

Normalization layers run on their recorded running statistics on both sides
of the match, so the statistics are per-sample and the collected targets do
not depend on batch composition or dataset order. Category-wise matching
replaces the global targets with per-class ones and averages the per-class
terms; with several networks the losses simply add up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .dataio import CondensedSet, VideoDataset, VideoItem
from .errors import CompatibilityError, ConfigError, StatsError, TrainingError
from .models import clips_to_tensor
from .temporal import canonical_input_clip, extract_clip
from .trajectory import Teacher

PIXEL_GUARD = (-1.0, 2.0)


@dataclass(frozen=True)
class DmConfig:
    """Weights and schedule of the statistical-matching objective.

    matched_layers=None matches every normalization layer plus the pooled
    feature; an explicit tuple restricts the set (it must be non-empty).
    batch_size=0 uses every synthetic item each iteration.
    """

    category_wise: bool = True
    stat_weight: float = 1.0
    cls_weight: float = 1.0
    batch_size: int = 0
    iterations: int = 200
    pixel_lr: float = 1.0
    momentum: float = 0.5
    matched_layers: Optional[tuple] = None

    def __post_init__(self):
        if self.stat_weight < 0 or self.cls_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.iterations < 0 or self.batch_size < 0:
            raise ConfigError("iterations and batch_size must be >= 0")
        if self.matched_layers is not None and len(self.matched_layers) == 0:
            raise ConfigError("matched_layers must name at least one layer")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["matched_layers"] is not None:
            d["matched_layers"] = list(d["matched_layers"])
        return d


@dataclass
class StatTarget:
    """Channel statistics of one layer of one network (optionally one class)."""

    network_id: str
    layer: str
    class_id: Optional[int]
    mean: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise StatsError(f"malformed stats for layer {self.layer!r}")
        if self.count < 1:
            raise StatsError(f"empty statistics for layer {self.layer!r}")
        # tiny negatives are accumulation noise, anything larger is a bug
        if float(self.var.min()) < -1e-9:
            raise StatsError(f"negative variance in layer {self.layer!r}")
        self.var = np.maximum(self.var, 0.0)


def matched_layer_names(model: nn.Module,
                        requested: Optional[tuple] = None) -> list:
    """Normalization-layer module names plus the 'pooled' pseudo-layer."""
    names = [name for name, mod in model.named_modules()
             if isinstance(mod, nn.BatchNorm3d)]
    names.append("pooled")
    if requested is None:
        return names
    missing = [r for r in requested if r not in names]
    if missing:
        raise ConfigError(f"unknown matched layers {missing}; have {names}")
    return [n for n in names if n in requested]


def _layer_activations(model: nn.Module, batch: torch.Tensor,
                       layers: list) -> dict:
    """Forward in eval mode, capturing the requested layer outputs."""
    acts = {}
    handles = []
    for name, mod in model.named_modules():
        if name in layers and name != "pooled":
            handles.append(mod.register_forward_hook(
                lambda _m, _i, out, key=name: acts.__setitem__(key, out)))
    was = model.training
    model.eval()
    try:
        pooled = model.forward_features(batch)
    finally:
        model.train(was)
        for h in handles:
            h.remove()
    if "pooled" in layers:
        acts["pooled"] = pooled
    return acts


def _channel_stats(act: torch.Tensor):
    """Population mean/variance per channel over batch and space-time.

    Works for pooled features [B, D] and conv maps [B, C, T, H, W]: channel
    moves first, everything else flattens.
    """
    flat = act.transpose(0, 1).reshape(act.shape[1], -1)
    mean = flat.mean(dim=1)
    var = flat.var(dim=1, unbiased=False)
    return mean, var


def collect_stat_targets(dataset: VideoDataset, networks: list,
                         per_class: bool = False, chunk: int = 32) -> list:
    """Exact activation statistics of the real dataset, one canonical clip
    per video, accumulated in float64 sums so order cannot matter."""
    if not networks:
        raise ConfigError("need at least one network")
    if per_class:
        present = {it.label for it in dataset}
        missing = set(range(dataset.num_classes)) - present
        if missing:
            names = [dataset.class_names[k] for k in sorted(missing)]
            raise StatsError(f"classes absent from dataset: {names}")
    targets = []
    for net in networks:
        layers = matched_layer_names(net.model)
        input_length = net.spec.input_size[0]
        dtype = next(net.model.parameters()).dtype
        # accumulators keyed (layer, class_id); class_id None = global
        sums, sqs, counts = {}, {}, {}
        for lo in range(0, len(dataset), chunk):
            part = dataset.items[lo:lo + chunk]
            views = [canonical_input_clip(it.frames, input_length)
                     for it in part]
            with torch.no_grad():
                acts = _layer_activations(
                    net.model, clips_to_tensor(views, dtype), layers)
            for layer, act in acts.items():
                a = act.double()
                groups = [(None, list(range(len(part))))]
                if per_class:
                    groups += [(k, [i for i, it in enumerate(part)
                                    if it.label == k])
                               for k in sorted(set(it.label for it in part))]
                for key_cls, rows in groups:
                    cols = a[rows].transpose(0, 1).reshape(a.shape[1], -1)
                    key = (layer, key_cls)
                    if key not in sums:
                        sums[key] = torch.zeros(a.shape[1], dtype=torch.float64)
                        sqs[key] = torch.zeros(a.shape[1], dtype=torch.float64)
                        counts[key] = 0
                    sums[key] += cols.sum(dim=1)
                    sqs[key] += (cols * cols).sum(dim=1)
                    counts[key] += cols.shape[1]
        for (layer, cls), s in sums.items():
            n = counts[(layer, cls)]
            mean = s / n
            var = sqs[(layer, cls)] / n - mean * mean
            targets.append(StatTarget(
                network_id=net.id, layer=layer, class_id=cls,
                mean=mean.numpy(), var=var.numpy(), count=n,
            ))
    return targets


def _target_index(targets: list) -> dict:
    return {(t.network_id, t.layer, t.class_id): t for t in targets}


def dm_loss(state, targets: list, networks: list, cfg: DmConfig,
            rng: np.random.Generator):
    """Statistical-matching loss of one synthetic batch.

    Returns (loss, parts) where parts holds the detached stat and
    classification terms. The loss sums over networks and matched layers;
    category_wise averages per-class terms over the classes in the batch.
    """
    index = _target_index(targets)
    n = state.pixels.shape[0]
    if cfg.batch_size and cfg.batch_size < n:
        idx = np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
    else:
        idx = np.arange(n)
    clips = [extract_clip(state.pixels[i], state.plan, rng) for i in idx]
    batch = torch.stack(clips).permute(0, 2, 1, 3, 4)
    hard = state.hard_labels[torch.as_tensor(idx)]

    stat_term = torch.zeros((), dtype=batch.dtype)
    cls_term = torch.zeros((), dtype=batch.dtype)
    for net in networks:
        layers = matched_layer_names(net.model, cfg.matched_layers)
        acts = _layer_activations(net.model, batch, layers)
        for layer in layers:
            act = acts[layer]
            if cfg.category_wise:
                terms = []
                for k in sorted(set(hard.tolist())):
                    tgt = index.get((net.id, layer, k))
                    if tgt is None:
                        raise CompatibilityError(
                            f"no per-class target for {net.id}/{layer}/class {k}")
                    rows = (hard == k).nonzero(as_tuple=True)[0]
                    terms.append(_stat_distance(act[rows], tgt))
                stat_term = stat_term + torch.stack(terms).mean()
            else:
                tgt = index.get((net.id, layer, None))
                if tgt is None:
                    raise CompatibilityError(
                        f"no global target for {net.id}/{layer}")
                stat_term = stat_term + _stat_distance(act, tgt)
        logits = net.model(batch)
        cls_term = cls_term + torch.nn.functional.cross_entropy(logits, hard)
    loss = cfg.stat_weight * stat_term + cfg.cls_weight * cls_term
    parts = {"stat": stat_term.item(), "cls": cls_term.item()}
    return loss, parts


def _stat_distance(act: torch.Tensor, tgt: StatTarget) -> torch.Tensor:
    mean, var = _channel_stats(act)
    if mean.shape[0] != tgt.mean.shape[0]:
        raise CompatibilityError(
            f"layer {tgt.layer!r}: activation has {mean.shape[0]} channels, "
            f"target has {tgt.mean.shape[0]}")
    tm = torch.as_tensor(tgt.mean, dtype=act.dtype)
    tv = torch.as_tensor(tgt.var, dtype=act.dtype)
    return (mean - tm).norm(2) + (var - tv).norm(2)


class _EdcState:
    """Synthetic pixels plus the bookkeeping dm_loss needs."""

    def __init__(self, init: CondensedSet, dtype=torch.float32):
        stack = np.stack([it.frames for it in init.items])
        self.pixels = torch.tensor(stack, dtype=dtype, requires_grad=True)
        self.hard_labels = torch.tensor([it.label for it in init.items])
        self.plan = init.plan
        self.ids = [it.id for it in init.items]


def run_edc(dataset: VideoDataset, cfg: DmConfig, init: CondensedSet,
            networks: list, seed: int = 0) -> CondensedSet:
    """Optimize synthetic pixels against collected statistics.

    Labels of the emitted set are the first network's logits on each final
    clip (stored raw); pixels are clamped to [0, 1] at emission.
    """
    if not networks:
        raise ConfigError("need at least one trained network")
    for net in networks:
        if not isinstance(net, Teacher):
            raise ConfigError("networks must be Teacher instances")
    targets = collect_stat_targets(dataset, networks,
                                   per_class=cfg.category_wise)
    state = _EdcState(init)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEDC]))
    stat_curve = []
    if cfg.iterations > 0:
        opt = torch.optim.SGD([state.pixels], lr=cfg.pixel_lr,
                              momentum=cfg.momentum)
        for iteration in range(cfg.iterations):
            loss, parts = dm_loss(state, targets, networks, cfg, rng)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite matching loss at iteration {iteration}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                lo = state.pixels.min().item()
                hi = state.pixels.max().item()
            if lo < PIXEL_GUARD[0] or hi > PIXEL_GUARD[1]:
                raise TrainingError(
                    f"synthetic pixels left {PIXEL_GUARD} at iteration "
                    f"{iteration} (min {lo:.3f}, max {hi:.3f}); lower pixel_lr")
            stat_curve.append(round(parts["stat"], 8))

    with torch.no_grad():
        pixels = state.pixels.clamp(0.0, 1.0).to(torch.float32).numpy()
    labeler = networks[0]
    input_length = labeler.spec.input_size[0]
    views = [canonical_input_clip(pixels[i], input_length)
             for i in range(len(state.ids))]
    logits = labeler.logits(clips_to_tensor(views)).double().numpy()
    items = []
    for i, vid in enumerate(state.ids):
        items.append(VideoItem(
            id=vid, frames=np.ascontiguousarray(pixels[i]),
            label=int(state.hard_labels[i]), soft_label=logits[i],
            meta={"source": vid},
        ))
    window = max(1, min(20, len(stat_curve) // 4)) if stat_curve else 0
    provenance = {
        "method": "edc", "seed": seed, "config": cfg.to_dict(),
        "networks": [net.id for net in networks],
        "label_kind": "logits", "labeling_network": labeler.id,
        "stat_first": float(np.mean(stat_curve[:window])) if stat_curve else None,
        "stat_last": float(np.mean(stat_curve[-window:])) if stat_curve else None,
    }
    return CondensedSet(
        items=items, class_names=init.class_names, ipc=init.ipc,
        plan=init.plan, labeling="soft", provenance=provenance,
    )
