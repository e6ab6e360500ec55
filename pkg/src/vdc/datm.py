"""Trajectory-matching distillation with a difficulty curriculum.

The objective for one segment: unroll a student from an expert snapshot for a
few SGD steps on the synthetic clips, then measure how close it lands to a
later expert snapshot, normalized by how far the expert itself moved:

    ||theta_student_end - theta_expert_later||^2
    --------------------------------------------
    ||theta_expert_start - theta_expert_later||^2

Pixels, soft labels (logits), and optionally the student step size are all
optimized through this loss. Segment start epochs are drawn from a window
whose upper end grows linearly over the first half of the run, so easy
(early, fast-moving) segments come first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataio import CondensedSet, VideoItem
from .errors import (
    CompatibilityError,
    ConfigError,
    DegenerateSegmentError,
    TrainingError,
)
from .models import build_model, clips_to_tensor, unrolled_steps
from .temporal import canonical_input_clip, extract_clip
from .trajectory import ExpertTrajectory, Teacher

PIXEL_GUARD = (-1.0, 2.0)  # optimization bounds; emission clamps to [0, 1]


@dataclass(frozen=True)
class TmConfig:
    """Knobs of the segment-matching objective and its outer optimization.

    expert_span    epochs the expert segment covers (the matching target)
    student_steps  SGD steps the student unrolls per loss evaluation
    batch_syn      synthetic clips per student step (0 = all items)
    """

    expert_span: int = 1
    student_steps: int = 1
    batch_syn: int = 0
    iterations: int = 200
    pixel_lr: float = 3.0
    label_lr: float = 0.1
    student_lr: float = 0.02
    learn_student_lr: bool = True
    student_lr_lr: float = 1e-4
    momentum: float = 0.5
    t_min: int = 0
    t_max_initial: int = 1
    curriculum_frac: float = 0.5
    epsilon_denom: float = 1e-12

    def __post_init__(self):
        if self.expert_span < 1 or self.student_steps < 1:
            raise ConfigError("expert_span and student_steps must be >= 1")
        if self.iterations < 0 or self.batch_syn < 0:
            raise ConfigError("iterations and batch_syn must be >= 0")
        if not (0 <= self.t_min <= self.t_max_initial):
            raise ConfigError("need 0 <= t_min <= t_max_initial")
        if not self.epsilon_denom > 0:
            raise ConfigError("epsilon_denom must be positive")
        if not (0.0 < self.curriculum_frac <= 1.0):
            raise ConfigError("curriculum_frac must be in (0, 1]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class SyntheticState:
    """Learnable synthetic videos, soft-label logits, and student step size."""

    def __init__(self, pixels: torch.Tensor, labels: torch.Tensor,
                 hard_labels: torch.Tensor, student_lr: torch.Tensor,
                 plan, ids, class_names):
        self.pixels = pixels
        self.labels = labels
        self.hard_labels = hard_labels
        self.student_lr = student_lr
        self.plan = plan
        self.ids = list(ids)
        self.class_names = list(class_names)

    @classmethod
    def from_condensed(cls, init: CondensedSet, teacher: Teacher,
                       cfg: TmConfig, dtype=torch.float32) -> "SyntheticState":
        """Pixels copy the init items; labels start as teacher logits on each
        item's canonical clip; the student lr starts at the configured value."""
        stack = np.stack([it.frames for it in init.items])
        pixels = torch.tensor(stack, dtype=dtype, requires_grad=True)
        input_length = teacher.spec.input_size[0]
        views = [canonical_input_clip(it.frames, input_length)
                 for it in init.items]
        logits = teacher.logits(clips_to_tensor(views)).to(dtype)
        labels = logits.clone().detach().requires_grad_(True)
        hard = torch.tensor([it.label for it in init.items])
        lr = torch.tensor(float(cfg.student_lr), dtype=dtype,
                          requires_grad=cfg.learn_student_lr)
        return cls(pixels, labels, hard, lr, init.plan,
                   [it.id for it in init.items], init.class_names)

    def sample_batch(self, batch_syn: int, rng: np.random.Generator):
        """One student-step batch: windows per the sampling plan, soft targets."""
        n = self.pixels.shape[0]
        if batch_syn and batch_syn < n:
            idx = np.sort(rng.choice(n, size=batch_syn, replace=False))
        else:
            idx = np.arange(n)
        clips = [extract_clip(self.pixels[i], self.plan, rng) for i in idx]
        batch = torch.stack(clips).permute(0, 2, 1, 3, 4)
        return batch, self.labels[torch.as_tensor(idx)]

    def trainables(self, cfg: TmConfig):
        groups = [
            {"params": [self.pixels], "lr": cfg.pixel_lr},
            {"params": [self.labels], "lr": cfg.label_lr},
        ]
        if cfg.learn_student_lr:
            groups.append({"params": [self.student_lr], "lr": cfg.student_lr_lr})
        return groups


def normalized_match_loss(theta_end: torch.Tensor, theta_start: torch.Tensor,
                          theta_target: torch.Tensor,
                          epsilon: float) -> torch.Tensor:
    """Squared end-to-target distance over squared start-to-target distance."""
    denom = (theta_start - theta_target).pow(2).sum()
    if float(denom) < epsilon:
        raise DegenerateSegmentError(
            f"expert segment moved {float(denom):.3e} < floor {epsilon:.3e}")
    return (theta_end - theta_target).pow(2).sum() / denom


def tm_loss(trajectory: ExpertTrajectory, t: int, state: SyntheticState,
            cfg: TmConfig, model, rng: np.random.Generator) -> torch.Tensor:
    """Match one expert segment starting at snapshot t; differentiable w.r.t.
    state pixels, labels, and student lr."""
    if t < 0 or t + cfg.expert_span > trajectory.last_index:
        raise ConfigError(
            f"segment [{t}, {t + cfg.expert_span}] outside trajectory "
            f"of {trajectory.last_index} epochs")
    dtype = state.pixels.dtype
    theta_start = trajectory.params[t].to(dtype)
    theta_target = trajectory.params[t + cfg.expert_span].to(dtype)
    denom = (theta_start - theta_target).pow(2).sum()
    if float(denom) < cfg.epsilon_denom:
        raise DegenerateSegmentError(
            f"expert segment [{t}, {t + cfg.expert_span}] moved "
            f"{float(denom):.3e} < floor {cfg.epsilon_denom:.3e}")
    buffers = trajectory.buffers[t].to(dtype)
    batches = [state.sample_batch(cfg.batch_syn, rng)
               for _ in range(cfg.student_steps)]
    theta_end = unrolled_steps(model, theta_start, batches,
                               lr=state.student_lr, buffer_vec=buffers)
    return (theta_end - theta_target).pow(2).sum() / denom


def curriculum_limit(cfg: TmConfig, iteration: int, hi_cap: int) -> int:
    """Upper end of the segment-start window at a given iteration.

    Grows linearly from t_max_initial to hi_cap over the first
    curriculum_frac of all iterations, then stays flat; never exceeds hi_cap.
    """
    grow = max(1, int(round(cfg.curriculum_frac * max(cfg.iterations, 1))))
    frac = min(1.0, iteration / grow)
    raw = cfg.t_max_initial + frac * (hi_cap - cfg.t_max_initial)
    return max(0, min(hi_cap, int(round(raw))))


def curriculum_sample(cfg: TmConfig, iteration: int, hi_cap: int,
                      rng: np.random.Generator) -> int:
    hi = curriculum_limit(cfg, iteration, hi_cap)
    lo = min(cfg.t_min, hi)
    return int(rng.integers(lo, hi + 1))


def run_datm(trajectories: list, init: CondensedSet, cfg: TmConfig,
             seed: int = 0) -> CondensedSet:
    """Distill synthetic videos by matching expert trajectory segments.

    Each iteration samples one expert and one start epoch from the curriculum
    window, takes a loss gradient step on (pixels, labels, student lr), and
    guards against pixel blow-up. Emission clamps pixels to [0, 1] and turns
    the label logits into probabilities.
    """
    if not trajectories:
        raise ConfigError("need at least one expert trajectory")
    spec = trajectories[0].model_spec()
    for tr in trajectories[1:]:
        if tr.spec_hash != trajectories[0].spec_hash:
            raise CompatibilityError("expert trajectories disagree on model spec")
    hi_cap = min(tr.last_index for tr in trajectories) - cfg.expert_span
    if hi_cap < 0:
        raise ConfigError(
            f"expert_span {cfg.expert_span} exceeds shortest trajectory")
    model = build_model(spec, seed)
    teacher = Teacher.from_trajectory(trajectories[0], spec, snapshot=-1)
    state = SyntheticState.from_condensed(init, teacher, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    losses, skipped = [], 0
    if cfg.iterations > 0:
        opt = torch.optim.SGD(state.trainables(cfg), momentum=cfg.momentum)
        for iteration in range(cfg.iterations):
            tr = trajectories[int(rng.integers(len(trajectories)))]
            t = curriculum_sample(cfg, iteration, hi_cap, rng)
            try:
                loss = tm_loss(tr, t, state, cfg, model, rng)
            except DegenerateSegmentError:
                skipped += 1
                continue
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite matching loss at iteration "
                                    f"{iteration}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                if cfg.learn_student_lr:
                    state.student_lr.clamp_(min=1e-6)
                lo, hi = float(state.pixels.min()), float(state.pixels.max())
            if lo < PIXEL_GUARD[0] or hi > PIXEL_GUARD[1]:
                raise TrainingError(
                    f"synthetic pixels left {PIXEL_GUARD} at iteration "
                    f"{iteration} (min {lo:.3f}, max {hi:.3f}); lower pixel_lr")
            losses.append(loss.item())

    with torch.no_grad():
        pixels = state.pixels.clamp(0.0, 1.0).to(torch.float32).numpy()
        probs = torch.softmax(state.labels, dim=-1).to(torch.float64).numpy()
    items = []
    for i, vid in enumerate(state.ids):
        items.append(VideoItem(
            id=vid, frames=np.ascontiguousarray(pixels[i]),
            label=int(state.hard_labels[i]), soft_label=probs[i],
            meta={"source": vid},
        ))
    window = max(1, min(20, len(losses) // 4)) if losses else 0
    provenance = {
        "method": "datm", "seed": seed, "config": cfg.to_dict(),
        "teacher": teacher.id,
        "experts": [{"seed": tr.seed, "epochs": tr.epochs}
                    for tr in trajectories],
        "skipped_segments": skipped,
        "loss_first": float(np.mean(losses[:window])) if losses else None,
        "loss_last": float(np.mean(losses[-window:])) if losses else None,
        "final_student_lr": state.student_lr.item(),
    }
    return CondensedSet(
        items=items, class_names=init.class_names, ipc=init.ipc,
        plan=init.plan, labeling="soft", provenance=provenance,
    )
