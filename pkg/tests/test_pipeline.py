"""Experiment runner: config handling, stage cache, manifest, results table."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest
import yaml

from vdc.dataio import VideoDataset, make_micro_dataset, write_dataset
from vdc.errors import CacheError, ConfigError, StageError
from vdc.pipeline import (
    CATEGORIES,
    DEFAULT_CONFIG,
    Cache,
    RunManifest,
    _merge,
    _reference_set,
    _run_stage,
    load_config,
    render_table,
    run_pipeline,
    validate_config,
)


def _tiny_config(root, **over):
    """Small but complete config: every method, two eval seeds, ~2s clean."""
    cfg = {
        "name": "tiny",
        "out_dir": str(root / "out"),
        "cache_dir": str(root / "cache"),
        "dataset": {"videos_per_class": 6, "val_videos_per_class": 4},
        "model": {"width_mult": 0.25},
        "experts": {"count": 2, "epochs": 6},
        "condense": {
            "methods": ["random", "rded", "edc", "datm"],
            "pairs": [[1, 12]],
            "rded": {"clips_per_video": 2},
            "edc": {"iterations": 8, "pixel_lr": 0.1, "networks": 2},
            "datm": {"iterations": 8, "expert_span": 1, "student_steps": 2,
                     "pixel_lr": 1.0, "student_lr": 0.05},
        },
        "evaluate": {"labelings": ["hard"], "epochs": 4, "seeds": [0, 1],
                     "reference": {"enabled": True, "labeling": "hard"}},
    }
    return _merge(cfg, over)


def _minimal_config(root, **over):
    """Cheapest valid config (one method, zero eval epochs) for plumbing tests."""
    cfg = {
        "name": "minimal",
        "out_dir": str(root / "out"),
        "cache_dir": str(root / "cache"),
        "dataset": {"videos_per_class": 3, "val_videos_per_class": 2},
        "model": {"width_mult": 0.25},
        "experts": {"count": 1, "epochs": 1},
        "condense": {"methods": ["random"], "pairs": [[1, 8]],
                     "edc": {"networks": 1}},
        "evaluate": {"labelings": ["hard"], "epochs": 0, "seeds": [0],
                     "reference": {"enabled": False}},
    }
    return _merge(cfg, over)


# ---------------------------------------------------------------------------
# config loading


def test_empty_yaml_yields_defaults(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("")
    assert load_config(p) == DEFAULT_CONFIG


def test_yaml_overrides_merge_nested(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({"condense": {"seed": 7},
                                 "evaluate": {"epochs": 10}}))
    cfg = load_config(p)
    assert cfg["condense"]["seed"] == 7
    assert cfg["evaluate"]["epochs"] == 10
    # siblings untouched
    assert cfg["condense"]["methods"] == DEFAULT_CONFIG["condense"]["methods"]
    assert cfg["evaluate"]["lr"] == DEFAULT_CONFIG["evaluate"]["lr"]


def test_unknown_top_level_key_rejected(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({"evaluation": {"epochs": 10}}))
    with pytest.raises(ConfigError, match="evaluation"):
        load_config(p)


@pytest.mark.parametrize("patch,needle", [
    ({"condense": {"methods": ["random", "kmeans"]}}, "kmeans"),
    ({"condense": {"pairs": [[0, 8]]}}, "pairs"),
    ({"condense": {"pairs": [[1]]}}, "pairs"),
    ({"evaluate": {"labelings": ["fuzzy"]}}, "labeling"),
    ({"experts": {"count": 0}}, "count"),
    ({"condense": {"edc": {"networks": 9}}}, "networks"),
    ({"dataset": {"kind": "tar"}}, "kind"),
])
def test_validate_config_rejects(patch, needle):
    cfg = _merge(DEFAULT_CONFIG, patch)
    with pytest.raises(ConfigError, match=needle):
        validate_config(cfg)


# ---------------------------------------------------------------------------
# cache and manifest plumbing


def test_cache_store_then_lookup(tmp_path):
    cache = Cache(tmp_path / "c")
    assert cache.lookup("stage", "abc") is None
    path = cache.store("stage", "abc", lambda d: (d / "x.txt").write_text("hi"))
    hit = cache.lookup("stage", "abc")
    assert hit == path
    assert (hit / "x.txt").read_text() == "hi"


def test_cache_detects_tampered_entry(tmp_path):
    cache = Cache(tmp_path / "c")
    path = cache.store("stage", "abc", lambda d: (d / "x.txt").write_text("hi"))
    (path / "x.txt").write_text("corrupted")
    with pytest.raises(CacheError, match="delete"):
        cache.lookup("stage", "abc")


def test_run_stage_wraps_build_failures(tmp_path):
    cache = Cache(tmp_path / "c")

    def bad(_):
        raise ValueError("boom")

    with pytest.raises(StageError, match="condense:rded"):
        _run_stage("condense:rded-ipc1-t8", cache, "k", bad)


def test_manifest_rejects_unknown_inputs(tmp_path):
    art = tmp_path / "a"
    art.mkdir()
    (art / "f").write_text("x")
    man = RunManifest(name="t", config_hash="h")
    man.add("generate", "g1", [], art, False, 0.1)
    with pytest.raises(ConfigError, match="unknown inputs"):
        man.add("experts", "e1", ["nope"], art, False, 0.1)
    man.add("experts", "e1", ["g1"], art, False, 0.1)


def test_manifest_verify_catches_later_edits(tmp_path):
    art = tmp_path / "a"
    art.mkdir()
    (art / "f").write_text("x")
    man = RunManifest(name="t", config_hash="h")
    man.add("generate", "g1", [], art, False, 0.1)
    man.verify()
    (art / "f").write_text("y")
    with pytest.raises(CacheError, match="modified"):
        man.verify()


# ---------------------------------------------------------------------------
# results table


def _row(method, acc, seed=0, ipc=1, t=12, labeling="hard"):
    return {"method": method, "category": CATEGORIES[method], "ipc": ipc,
            "stored_length": t, "labeling": labeling, "seed": seed,
            "accuracy": acc, "metric": "top1"}


def test_table_marks_category_and_overall_best():
    rows = [_row("random", 0.40), _row("herding", 0.50), _row("rded", 0.45),
            _row("edc", 0.60), _row("datm", 0.55), _row("full", 0.90)]
    table = render_table(rows)
    assert "_0.500_" in table      # best selection
    assert "**0.600**" in table    # best overall (distillation)
    # the reference row never gets a mark, even at the top accuracy
    assert "_0.900_" not in table and "**0.900**" not in table
    assert "(tied)" not in table


def test_table_tie_stars_earlier_method_and_flags_both():
    rows = [_row("random", 0.5), _row("herding", 0.5), _row("edc", 0.4)]
    table = render_table(rows)
    lines = {m: next(l for l in table.splitlines() if f" {m} " in f" {l} ")
             for m in ("random", "herding", "edc")}
    assert "**0.500** (tied)" in lines["random"]
    assert "(tied)" in lines["herding"] and "**" not in lines["herding"]
    assert "_0.400_" in lines["edc"]


def test_table_averages_seeds_within_method():
    rows = [_row("random", 0.4, seed=0), _row("random", 0.6, seed=1)]
    table = render_table(rows)
    assert "0.400 0.600" in table
    assert "**0.500**" in table


def test_table_groups_by_budget_and_labeling():
    rows = [_row("random", 0.4), _row("random", 0.5, ipc=2, t=6),
            _row("random", 0.6, labeling="multi_sl")]
    table = render_table(rows)
    # three groups, each with its own starred best
    assert table.count("**") == 6


def test_empty_results_rejected():
    with pytest.raises(ConfigError):
        render_table([])


# ---------------------------------------------------------------------------
# reference row


def test_reference_set_wraps_balanced_dataset():
    ds = make_micro_dataset(num_classes=2, videos_per_class=3, num_frames=8,
                            seed=0, height=16, width=16)
    ref = _reference_set(ds, input_length=8)
    assert ref.ipc == 3
    assert ref.labeling == "hard"
    assert ref.provenance["method"] == "full"
    assert len(ref.items) == 6


def test_reference_set_rejects_unbalanced():
    ds = make_micro_dataset(num_classes=2, videos_per_class=3, num_frames=8,
                            seed=0, height=16, width=16)
    lopsided = VideoDataset(items=ds.items[:-1], class_names=ds.class_names)
    with pytest.raises(ConfigError, match="balanced"):
        _reference_set(lopsided, input_length=8)


def test_reference_set_rejects_mixed_lengths():
    ds = make_micro_dataset(num_classes=2, videos_per_class=2, num_frames=8,
                            seed=0, height=16, width=16)
    items = list(ds.items)
    short = items[0]
    items[0] = type(short)(id=short.id, frames=short.frames[:5],
                           label=short.label)
    mixed = VideoDataset(items=items, class_names=ds.class_names)
    with pytest.raises(ConfigError, match="equal-length"):
        _reference_set(mixed, input_length=4)


# ---------------------------------------------------------------------------
# end-to-end runs (module fixture shares one warm cache)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    os.environ.pop("VDC_CACHE_DIR", None)
    root = tmp_path_factory.mktemp("pipe")
    cfg = _tiny_config(root)
    first = run_pipeline(cfg)
    warm = run_pipeline(cfg)
    clean_root = tmp_path_factory.mktemp("pipe-clean")
    clean = run_pipeline(_tiny_config(clean_root))
    return {"root": root, "clean_root": clean_root,
            "first": first, "warm": warm, "clean": clean}


def test_run_writes_artifacts(runs):
    out = runs["root"] / "out"
    for name in ("results.json", "table.txt", "manifest.json"):
        assert (out / name).exists(), name
    manifest, results, table = runs["first"]
    assert json.loads((out / "results.json").read_text()) == results
    assert (out / "table.txt").read_text() == table


def test_first_run_builds_everything(runs):
    manifest = runs["first"][0]
    assert all(not s["cached"] for s in manifest.stages)
    stage_names = [s["stage"] for s in manifest.stages]
    assert stage_names[0] == "generate"
    assert stage_names[1] == "experts"
    # 4 methods condensed + evaluated, plus the reference evaluation
    assert sum(s.startswith("condense:") for s in stage_names) == 4
    assert sum(s.startswith("evaluate:") for s in stage_names) == 5


def test_rerun_hits_cache_everywhere(runs):
    manifest = runs["warm"][0]
    assert all(s["cached"] for s in manifest.stages)
    assert runs["warm"][1] == runs["first"][1]
    assert runs["warm"][2] == runs["first"][2]


def test_clean_runs_are_byte_identical(runs):
    for name in ("results.json", "table.txt"):
        a = (runs["root"] / "out" / name).read_bytes()
        b = (runs["clean_root"] / "out" / name).read_bytes()
        assert a == b, name


def test_manifest_inputs_form_a_dag(runs):
    manifest = runs["first"][0]
    seen = set()
    for s in manifest.stages:
        assert all(k in seen for k in s["inputs"])
        seen.add(s["key"])
    # every condense and evaluate stage depends on something upstream
    for s in manifest.stages:
        if s["stage"].startswith(("condense:", "evaluate:")):
            assert s["inputs"]


def test_editing_one_method_recomputes_only_it(runs):
    cfg = _tiny_config(runs["root"],
                       condense={"rded": {"clips_per_video": 3}})
    manifest, results, _ = run_pipeline(cfg, out_dir=runs["root"] / "out2")
    cached = {s["stage"]: s["cached"] for s in manifest.stages}
    assert cached["generate"] and cached["experts"]
    for stage, hit in cached.items():
        if "rded" in stage:
            assert not hit, stage
        else:
            assert hit, stage
    # the rded stage key actually moved
    old = {s["stage"]: s["key"] for s in runs["first"][0].stages}
    new = {s["stage"]: s["key"] for s in manifest.stages}
    assert new["condense:rded-ipc1-t12"] != old["condense:rded-ipc1-t12"]
    assert new["condense:random-ipc1-t12"] == old["condense:random-ipc1-t12"]


def test_results_rows_complete_and_sorted(runs):
    results = runs["first"][1]
    methods = {r["method"] for r in results}
    assert methods == {"random", "rded", "edc", "datm", "full"}
    for r in results:
        assert r["category"] == CATEGORIES[r["method"]]
        assert 0.0 <= r["accuracy"] <= 1.0
        assert r["seed"] in (0, 1)
    assert results == sorted(
        results, key=lambda r: (r["ipc"], r["stored_length"], r["labeling"],
                                list(CATEGORIES).index(r["method"]), r["seed"]))


def test_budget_sweep_keeps_frame_count(tmp_path):
    cfg = _minimal_config(tmp_path, condense={"pairs": [[1, 8], [2, 4]]})
    _, results, table = run_pipeline(cfg)
    budgets = {(r["ipc"], r["stored_length"]) for r in results}
    assert budgets == {(1, 8), (2, 4)}
    assert len({ipc * t for ipc, t in budgets}) == 1
    assert table.count("random") == 2


def test_dirs_dataset_kind_skips_generation(tmp_path):
    train = make_micro_dataset(num_classes=2, videos_per_class=3,
                               num_frames=8, seed=0, height=16, width=16)
    val = make_micro_dataset(num_classes=2, videos_per_class=2, num_frames=8,
                             seed=9, height=16, width=16, id_prefix="val")
    write_dataset(train, tmp_path / "data" / "train")
    write_dataset(val, tmp_path / "data" / "val")
    cfg = _minimal_config(
        tmp_path,
        dataset={"kind": "dirs", "train_dir": str(tmp_path / "data" / "train"),
                 "val_dir": str(tmp_path / "data" / "val")})
    manifest, results, _ = run_pipeline(cfg)
    assert manifest.stages[0]["stage"] == "experts"
    assert {r["method"] for r in results} == {"random"}


def test_cache_dir_env_override(tmp_path, monkeypatch):
    envcache = tmp_path / "elsewhere"
    monkeypatch.setenv("VDC_CACHE_DIR", str(envcache))
    cfg = _minimal_config(tmp_path)
    run_pipeline(cfg)
    assert any(envcache.iterdir())
    assert not (tmp_path / "cache").exists()


def test_poisoned_cache_fails_loudly(tmp_path):
    cfg = _minimal_config(tmp_path)
    run_pipeline(cfg)
    cache_root = tmp_path / "cache"
    victim = next(p for p in cache_root.iterdir()
                  if p.name.startswith("condense-"))
    blob = next(p for p in victim.rglob("*.bin"))
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CacheError, match="delete"):
        run_pipeline(cfg)
