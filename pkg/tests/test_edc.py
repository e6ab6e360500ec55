"""Statistical-matching distiller against independent numpy oracles."""

import numpy as np
import pytest
import torch

from vdc.dataio import VideoDataset, VideoItem, make_micro_dataset
from vdc.edc import (DmConfig, StatTarget, _EdcState, _layer_activations,
                     collect_stat_targets, dm_loss, matched_layer_names,
                     run_edc)
from vdc.errors import CompatibilityError, ConfigError, StatsError
from vdc.models import ModelSpec, build_model, clips_to_tensor
from vdc.selection import select_random
from vdc.temporal import canonical_input_clip
from vdc.trajectory import ExpertConfig, Teacher, train_expert


def _spec(num_classes=4, length=8, width=0.25, arch="mini_c3d"):
    return ModelSpec(arch=arch, input_size=(length, 3, 16, 16),
                     num_classes=num_classes, width_mult=width)


@pytest.fixture(scope="module")
def micro():
    return make_micro_dataset(num_classes=4, videos_per_class=6,
                              num_frames=16, seed=3)


@pytest.fixture(scope="module")
def teachers(micro):
    spec = _spec()
    out = []
    for s in (0, 1):
        model = build_model(spec, seed=s)
        traj = train_expert(model, micro, epochs=2,
                            config=ExpertConfig(lr=0.02, batch_size=8), seed=s)
        out.append(Teacher.from_trajectory(traj, spec, snapshot=-1))
    return out


def _untrained_teacher(spec, seed=0):
    return Teacher(build_model(spec, seed=seed))


# ---------------------------------------------------------------------------
# config and layer discovery


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        DmConfig(stat_weight=-1.0)
    with pytest.raises(ConfigError):
        DmConfig(cls_weight=-0.5)
    with pytest.raises(ConfigError):
        DmConfig(iterations=-1)
    with pytest.raises(ConfigError):
        DmConfig(matched_layers=())


def test_matched_layer_names_cover_all_norm_layers():
    mini = build_model(_spec(), seed=0)
    names = matched_layer_names(mini)
    assert names == [f"blocks.{i}.norm" for i in range(4)] + ["pooled"]

    fact = build_model(_spec(arch="factorized_st"), seed=0)
    assert len(matched_layer_names(fact)) == 9  # two norms per block + pooled

    # requested subsets keep canonical order; unknown names are rejected
    sub = matched_layer_names(mini, requested=("pooled", "blocks.2.norm"))
    assert sub == ["blocks.2.norm", "pooled"]
    with pytest.raises(ConfigError):
        matched_layer_names(mini, requested=("blocks.9.norm",))


# ---------------------------------------------------------------------------
# target collection


def test_stat_targets_match_two_pass_oracle(micro):
    net = _untrained_teacher(_spec())
    targets = collect_stat_targets(micro, [net], per_class=False, chunk=5)
    by_layer = {t.layer: t for t in targets}

    views = [canonical_input_clip(it.frames, 8) for it in micro]
    with torch.no_grad():
        acts = _layer_activations(net.model, clips_to_tensor(views),
                                  matched_layer_names(net.model))
    for layer, act in acts.items():
        a = act.double().transpose(0, 1).reshape(act.shape[1], -1).numpy()
        mean = a.mean(axis=1)
        var = ((a - mean[:, None]) ** 2).mean(axis=1)  # two-pass, exact
        np.testing.assert_allclose(by_layer[layer].mean, mean, atol=1e-10)
        np.testing.assert_allclose(by_layer[layer].var, var, atol=1e-10)
        assert by_layer[layer].count == a.shape[1]


def test_identical_items_collapse_pooled_variance():
    # conv maps keep spatial variance (padding makes borders differ), but the
    # pooled feature of identical items has no batch spread at all
    frames = np.full((8, 3, 16, 16), 0.5, dtype=np.float32)
    items = [VideoItem(id=f"v{i}", frames=frames.copy(), label=i % 2,
                       meta={}) for i in range(4)]
    ds = VideoDataset(items=items, class_names=("a", "b"))
    net = _untrained_teacher(_spec(num_classes=2))
    targets = {t.layer: t for t in collect_stat_targets(ds, [net])}
    assert targets["pooled"].var.max() < 1e-9
    for t in targets.values():
        assert t.var.min() >= 0.0


def test_per_class_record_counts(micro, teachers):
    layers = 5  # four norm layers + pooled
    flat = collect_stat_targets(micro, teachers, per_class=False)
    assert len(flat) == layers * len(teachers)
    split = collect_stat_targets(micro, teachers, per_class=True)
    assert len(split) == layers * len(teachers) * (1 + micro.num_classes)
    ids = {t.network_id for t in split}
    assert ids == {n.id for n in teachers}


def test_per_class_requires_every_class(micro):
    net = _untrained_teacher(_spec())
    kept = [it for it in micro if it.label != 2]
    trimmed = VideoDataset(items=kept, class_names=micro.class_names)
    with pytest.raises(StatsError, match=micro.class_names[2]):
        collect_stat_targets(trimmed, [net], per_class=True)


def test_collection_is_order_invariant(micro):
    net = _untrained_teacher(_spec())
    a = collect_stat_targets(micro, [net], per_class=True, chunk=5)
    shuffled = list(micro.items)
    np.random.default_rng(0).shuffle(shuffled)
    ds = VideoDataset(items=shuffled, class_names=micro.class_names)
    b = collect_stat_targets(ds, [net], per_class=True, chunk=7)
    bi = {(t.layer, t.class_id): t for t in b}
    for t in a:
        other = bi[(t.layer, t.class_id)]
        assert other.count == t.count
        np.testing.assert_allclose(other.mean, t.mean, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(other.var, t.var, rtol=1e-8, atol=1e-12)


# ---------------------------------------------------------------------------
# loss


def _double_setup(num_classes=2, ipc=1, videos=3, category_wise=False):
    """Small float64 network + targets + synthetic state for exact checks."""
    ds = make_micro_dataset(num_classes=num_classes, videos_per_class=videos,
                            num_frames=12, seed=11)
    spec = _spec(num_classes=num_classes)
    net = Teacher(build_model(spec, seed=5).double())
    targets = collect_stat_targets(ds, [net], per_class=category_wise)
    init = select_random(ds, ipc=ipc, stored_length=8, seed=1, input_length=8)
    state = _EdcState(init, dtype=torch.float64)
    return net, targets, state


def test_loss_matches_independent_recomputation():
    net, targets, state = _double_setup(num_classes=2, ipc=2)
    cfg = DmConfig(category_wise=False, stat_weight=1.0, cls_weight=1.0)
    rng = np.random.default_rng(0)
    loss, parts = dm_loss(state, targets, [net], cfg, rng)

    # plan is naive with equal lengths, so the batch is just the pixels
    batch = state.pixels.detach().permute(0, 2, 1, 3, 4)
    with torch.no_grad():
        acts = _layer_activations(net.model, batch,
                                  matched_layer_names(net.model))
        logits = net.model(batch).numpy()
    index = {t.layer: t for t in targets}
    want_stat = 0.0
    for layer, act in acts.items():
        a = act.transpose(0, 1).reshape(act.shape[1], -1).numpy()
        mean = a.mean(axis=1)
        var = a.var(axis=1)
        want_stat += np.linalg.norm(mean - index[layer].mean)
        want_stat += np.linalg.norm(var - index[layer].var)
    labels = state.hard_labels.numpy()
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    want_cls = -logp[np.arange(len(labels)), labels].mean()

    assert abs(parts["stat"] - want_stat) < 1e-10
    assert abs(parts["cls"] - want_cls) < 1e-10
    assert abs(loss.item() - (want_stat + want_cls)) < 1e-10


def test_loss_weights_scale_terms_linearly():
    net, targets, state = _double_setup(num_classes=2, ipc=2)
    base = DmConfig(category_wise=False)
    rng = np.random.default_rng(0)
    _, parts = dm_loss(state, targets, [net], base, rng)
    for sw, cw in ((2.0, 1.0), (1.0, 3.0), (0.0, 1.0), (0.5, 0.0)):
        cfg = DmConfig(category_wise=False, stat_weight=sw, cls_weight=cw)
        loss, _ = dm_loss(state, targets, [net], cfg,
                          np.random.default_rng(0))
        want = sw * parts["stat"] + cw * parts["cls"]
        assert abs(loss.item() - want) < 1e-9


def test_single_class_batch_collapses_to_global_match():
    # a batch holding one class compares against that class's targets, which
    # must equal a global match run against those same statistics
    ds = make_micro_dataset(num_classes=2, videos_per_class=4,
                            num_frames=12, seed=2)
    net = Teacher(build_model(_spec(num_classes=2), seed=0).double())
    split = collect_stat_targets(ds, [net], per_class=True)
    as_global = [StatTarget(t.network_id, t.layer, None, t.mean, t.var,
                            t.count) for t in split if t.class_id == 0]
    init = select_random(ds, ipc=2, stored_length=8, seed=0, input_length=8)
    state = _EdcState(init, dtype=torch.float64)
    state.hard_labels = torch.zeros_like(state.hard_labels)
    per_cls, _ = dm_loss(state, split, [net],
                         DmConfig(category_wise=True),
                         np.random.default_rng(0))
    global_, _ = dm_loss(state, as_global, [net],
                         DmConfig(category_wise=False),
                         np.random.default_rng(0))
    assert abs(per_cls.item() - global_.item()) < 1e-10


def test_multi_network_loss_is_sum_of_single_network_losses(micro, teachers):
    targets = collect_stat_targets(micro, teachers, per_class=True)
    init = select_random(micro, ipc=1, stored_length=8, seed=0,
                         input_length=8)
    state = _EdcState(init)
    cfg = DmConfig()
    both, _ = dm_loss(state, targets, teachers, cfg, np.random.default_rng(4))
    singles = [dm_loss(state, targets, [n], cfg,
                       np.random.default_rng(4))[0] for n in teachers]
    assert both.item() == pytest.approx(sum(s.item() for s in singles),
                                        rel=1e-6)


def test_batch_subsampling_restricts_rows(micro, teachers):
    targets = collect_stat_targets(micro, [teachers[0]], per_class=False)
    init = select_random(micro, ipc=3, stored_length=8, seed=0,
                         input_length=8)
    state = _EdcState(init)
    cfg = DmConfig(category_wise=False, batch_size=4)
    loss, _ = dm_loss(state, targets, [teachers[0]], cfg,
                      np.random.default_rng(0))
    assert torch.isfinite(loss)
    grad = torch.autograd.grad(loss, state.pixels)[0]
    touched = (grad.reshape(grad.shape[0], -1).abs().sum(dim=1) > 0)
    assert int(touched.sum()) == 4


def test_unknown_network_and_channel_mismatch_raise(micro):
    small = _untrained_teacher(_spec(width=0.25))
    targets = collect_stat_targets(micro, [small], per_class=False)
    init = select_random(micro, ipc=1, stored_length=8, seed=0,
                         input_length=8)
    state = _EdcState(init)
    other = _untrained_teacher(_spec(width=0.5), seed=9)
    cfg = DmConfig(category_wise=False)
    with pytest.raises(CompatibilityError):
        dm_loss(state, targets, [other], cfg, np.random.default_rng(0))
    # forge the id so lookup succeeds but channel widths disagree
    for t in targets:
        t.network_id = other.id
    with pytest.raises(CompatibilityError, match="channels"):
        dm_loss(state, targets, [other], cfg, np.random.default_rng(0))


def test_pixel_gradients_match_finite_differences():
    net, targets, state = _double_setup(num_classes=2, ipc=1,
                                        category_wise=True)
    cfg = DmConfig(category_wise=True)

    def value(pix):
        st = type(state).__new__(type(state))
        st.pixels = pix
        st.hard_labels = state.hard_labels
        st.plan = state.plan
        st.ids = state.ids
        loss, _ = dm_loss(st, targets, [net], cfg, np.random.default_rng(0))
        return loss

    loss = value(state.pixels)
    grad = torch.autograd.grad(loss, state.pixels)[0]

    rng = np.random.default_rng(7)
    flat = state.pixels.detach().clone().reshape(-1)
    coords = rng.choice(flat.numel(), size=24, replace=False)
    h = 1e-6
    for c in coords:
        for sign, store in ((+1, "hi"), (-1, "lo")):
            pert = flat.clone()
            pert[c] += sign * h
            v = value(pert.reshape(state.pixels.shape)).item()
            if sign > 0:
                hi = v
            else:
                lo = v
        fd = (hi - lo) / (2 * h)
        g = grad.reshape(-1)[c].item()
        assert abs(fd - g) / max(abs(fd), abs(g), 1e-8) < 1e-3


# ---------------------------------------------------------------------------
# optimization driver


def test_run_edc_zero_iterations_keeps_pixels(micro, teachers):
    init = select_random(micro, ipc=1, stored_length=8, seed=0,
                         input_length=8)
    out = run_edc(micro, DmConfig(iterations=0), init, teachers, seed=0)
    assert out.labeling == "soft"
    assert out.ipc == 1 and out.plan == init.plan
    for a, b in zip(out.items, init.items):
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.label == b.label
    # labels are the first network's logits on the canonical clips
    views = [canonical_input_clip(it.frames, 8) for it in init.items]
    want = teachers[0].logits(clips_to_tensor(views)).double().numpy()
    got = np.stack([it.soft_label for it in out.items])
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert out.provenance["networks"] == [n.id for n in teachers]
    assert out.provenance["label_kind"] == "logits"


def test_run_edc_reduces_statistics_gap(micro, teachers):
    init = select_random(micro, ipc=1, stored_length=8, seed=0,
                         input_length=8)
    cfg = DmConfig(iterations=60, pixel_lr=1.0)
    out = run_edc(micro, cfg, init, teachers, seed=0)
    prov = out.provenance
    assert prov["stat_last"] < prov["stat_first"]
    for it in out.items:
        assert it.frames.min() >= 0.0 and it.frames.max() <= 1.0
        assert it.soft_label is not None


def test_run_edc_is_deterministic(micro, teachers):
    init = select_random(micro, ipc=1, stored_length=8, seed=0,
                         input_length=8)
    # batch_size below the synthetic count makes the seed pick the batches
    cfg = DmConfig(iterations=15, pixel_lr=1.0, batch_size=2)
    a = run_edc(micro, cfg, init, teachers, seed=6)
    b = run_edc(micro, cfg, init, teachers, seed=6)
    assert a.fingerprint() == b.fingerprint()
    c = run_edc(micro, cfg, init, teachers, seed=7)
    assert c.fingerprint() != a.fingerprint()


def test_run_edc_rejects_bad_networks(micro, teachers):
    init = select_random(micro, ipc=1, stored_length=8, seed=0,
                         input_length=8)
    with pytest.raises(ConfigError):
        run_edc(micro, DmConfig(), init, [], seed=0)
    with pytest.raises(ConfigError):
        run_edc(micro, DmConfig(), init, [teachers[0].model], seed=0)
