"""Experiment runner: config file in, results table out.

A run is four stages: generate (or ingest) datasets, train an expert pool,
condense by each configured method, evaluate every condensed set. Each stage
instance is cached content-addressed under (stage name, config slice, input
hashes), so editing one method's settings recomputes only that method's
condense and evaluate stages. Everything downstream of the config is seeded;
two clean runs of the same config produce byte-identical results tables.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataio import (CondensedSet, VideoDataset, make_micro_dataset,
                     read_dataset, write_dataset)
from .datm import TmConfig, run_datm
from .edc import DmConfig, run_edc
from .errors import CacheError, ConfigError, StageError
from .evaluation import EvalConfig, evaluate
from .models import ModelSpec, build_model
from .selection import select_herding, select_random, select_rded
from .temporal import default_plan
from .trajectory import (ExpertConfig, Teacher, load_trajectory,
                         save_trajectory, train_expert)

CATEGORIES = {
    "random": "selection", "herding": "selection", "rded": "selection",
    "edc": "distillation", "datm": "distillation",
    "full": "reference",
}
METHOD_ORDER = ("random", "herding", "rded", "edc", "datm", "full")


# ---------------------------------------------------------------------------
# config


DEFAULT_CONFIG = {
    "name": "micro",
    "out_dir": "runs/micro",
    "cache_dir": "runs/cache",
    "dataset": {
        "kind": "micro",
        "num_classes": 4,
        "videos_per_class": 20,
        "num_frames": 16,
        "seed": 0,
        "val_videos_per_class": 15,
        "val_seed": 100,
    },
    "model": {
        "arch": "mini_c3d",
        "input_length": 8,
        "height": 16,
        "width": 16,
        "width_mult": 0.5,
    },
    "experts": {
        "count": 3,
        "epochs": 24,
        "lr": 0.1,
        "momentum": 0.0,
        "batch_size": 8,
    },
    "condense": {
        "methods": ["random", "herding", "rded", "edc", "datm"],
        "pairs": [[1, 16]],
        "seed": 0,
        "rded": {"clips_per_video": 6},
        "edc": {"iterations": 200, "pixel_lr": 0.1, "networks": 2},
        "datm": {"iterations": 250, "expert_span": 2, "student_steps": 8,
                 "pixel_lr": 3.0, "student_lr": 0.1},
    },
    "evaluate": {
        "labelings": ["hard", "multi_sl"],
        "loss": "mse_gt",
        "epochs": 300,
        "base_batch": 10,
        "lr": 1e-3,
        "augmentation": ["resized_crop", "horizontal_flip"],
        "crop_scale": [0.8, 1.0],
        "seeds": [0, 1, 2],
        "metric": "top1",
        "reference": {"enabled": True, "labeling": "multi_sl"},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """YAML config over defaults; unknown top-level keys are rejected."""
    with open(path) as f:
        user = yaml.safe_load(f) or {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    known = set(CATEGORIES) - {"full"}
    bad = [m for m in cfg["condense"]["methods"] if m not in known]
    if bad:
        raise ConfigError(f"unknown condensation methods {bad}")
    for pair in cfg["condense"]["pairs"]:
        if len(pair) != 2 or pair[0] < 1 or pair[1] < 1:
            raise ConfigError(f"condense.pairs entries are [ipc, T_c]; got {pair}")
    for labeling in cfg["evaluate"]["labelings"]:
        if labeling not in ("hard", "soft", "multi_sl"):
            raise ConfigError(f"unknown labeling {labeling!r}")
    if cfg["experts"]["count"] < 1:
        raise ConfigError("experts.count must be >= 1")
    if cfg["condense"]["edc"]["networks"] > cfg["experts"]["count"]:
        raise ConfigError("edc.networks cannot exceed experts.count")
    if cfg["dataset"]["kind"] not in ("micro", "dirs"):
        raise ConfigError("dataset.kind must be 'micro' or 'dirs'")


def model_spec(cfg: dict, num_classes: int) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(
        arch=m["arch"],
        input_size=(m["input_length"], 3, m["height"], m["width"]),
        num_classes=num_classes,
        width_mult=m["width_mult"],
    )


# ---------------------------------------------------------------------------
# cache plumbing


def _hash_payload(stage: str, payload: dict) -> str:
    blob = json.dumps({"stage": stage, "payload": payload}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _file_checksums(root: Path) -> dict:
    sums = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "entry.json":
            sums[str(p.relative_to(root))] = hashlib.sha256(
                p.read_bytes()).hexdigest()[:16]
    return sums


class Cache:
    """Content-addressed stage artifacts under one directory."""

    def __init__(self, base):
        self.base = Path(base)
        self.base.mkdir(parents=True, exist_ok=True)

    def dir_for(self, stage: str, key: str) -> Path:
        return self.base / f"{stage}-{key}"

    def lookup(self, stage: str, key: str):
        """Path of a verified hit, or None. Corrupt entries raise."""
        path = self.dir_for(stage, key)
        entry = path / "entry.json"
        if not entry.exists():
            return None
        meta = json.loads(entry.read_text())
        if _file_checksums(path) != meta["checksums"]:
            raise CacheError(
                f"cache entry {path} does not match its recorded checksums; "
                f"delete that directory to purge it and rerun")
        return path

    def store(self, stage: str, key: str, build) -> Path:
        """Populate a fresh entry by calling build(dir)."""
        path = self.dir_for(stage, key)
        if path.exists():
            shutil.rmtree(path)
        tmp = path.with_suffix(".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        build(tmp)
        meta = {"stage": stage, "key": key,
                "checksums": _file_checksums(tmp)}
        (tmp / "entry.json").write_text(json.dumps(meta, sort_keys=True,
                                                   indent=1))
        tmp.rename(path)
        return path


@dataclass
class RunManifest:
    """Record of one pipeline run: every stage, its inputs, its artifacts."""

    name: str
    config_hash: str
    stages: list = field(default_factory=list)

    def add(self, stage_id: str, key: str, inputs: list, path: Path,
            cached: bool, wall_time: float):
        known = {s["key"] for s in self.stages}
        missing = [k for k in inputs if k not in known]
        if missing:
            raise ConfigError(
                f"stage {stage_id} references unknown inputs {missing}")
        self.stages.append({
            "stage": stage_id, "key": key, "inputs": list(inputs),
            "path": str(path), "cached": cached,
            "wall_time": round(wall_time, 3),
            "checksums": _file_checksums(Path(path)),
        })

    def verify(self):
        """Every artifact exists and still matches its checksums."""
        for s in self.stages:
            path = Path(s["path"])
            if not path.exists():
                raise CacheError(f"manifest artifact missing: {path}")
            if _file_checksums(path) != s["checksums"]:
                raise CacheError(
                    f"manifest artifact {path} was modified after the run; "
                    f"delete it to purge and rerun")

    def to_dict(self) -> dict:
        return {"name": self.name, "config_hash": self.config_hash,
                "stages": self.stages}


# ---------------------------------------------------------------------------
# stages


def _run_stage(stage_id: str, cache: Cache, key: str, build):
    """Cache lookup, else build; any failure aborts naming the stage."""
    try:
        hit = cache.lookup(stage_id.split(":")[0], key)
        if hit is not None:
            return hit, True
        path = cache.store(stage_id.split(":")[0], key, build)
        return path, False
    except CacheError:
        raise
    except Exception as exc:
        raise StageError(f"stage {stage_id} failed: {exc}") from exc


def _load_datasets(cfg, cache, manifest):
    d = cfg["dataset"]
    if d["kind"] == "dirs":
        train = read_dataset(d["train_dir"])
        val = read_dataset(d["val_dir"])
        return train, val, None
    key = _hash_payload("generate", d)

    def build(path: Path):
        train = make_micro_dataset(
            num_classes=d["num_classes"],
            videos_per_class=d["videos_per_class"],
            num_frames=d["num_frames"], seed=d["seed"])
        val = make_micro_dataset(
            num_classes=d["num_classes"],
            videos_per_class=d["val_videos_per_class"],
            num_frames=d["num_frames"], seed=d["val_seed"],
            id_prefix="val")
        write_dataset(train, path / "train")
        write_dataset(val, path / "val")

    t0 = time.time()
    path, cached = _run_stage("generate", cache, key, build)
    manifest.add("generate", key, [], path, cached, time.time() - t0)
    train = read_dataset(path / "train")
    val = read_dataset(path / "val")
    return train, val, key


def _train_experts(cfg, cache, manifest, train, gen_key):
    e = cfg["experts"]
    spec = model_spec(cfg, train.num_classes)
    payload = {"experts": e, "spec": spec.to_dict(),
               "train": train.fingerprint()}
    key = _hash_payload("experts", payload)

    def build(path: Path):
        xcfg = ExpertConfig(lr=e["lr"], momentum=e["momentum"],
                            batch_size=e["batch_size"])
        for s in range(e["count"]):
            model = build_model(spec, seed=s)
            traj = train_expert(model, train, epochs=e["epochs"],
                                config=xcfg, seed=s)
            save_trajectory(traj, path / f"expert-{s}.traj")

    t0 = time.time()
    path, cached = _run_stage("experts", cache, key,  build)
    inputs = [gen_key] if gen_key else []
    manifest.add("experts", key, inputs, path, cached, time.time() - t0)
    trajs = [load_trajectory(path / f"expert-{s}.traj", spec)
             for s in range(e["count"])]
    return trajs, key


def _condense_one(cfg, cache, manifest, train, trajs, expert_key, gen_key,
                  method, ipc, stored_length):
    c = cfg["condense"]
    spec = model_spec(cfg, train.num_classes)
    input_length = cfg["model"]["input_length"]
    slice_cfg = {"ipc": ipc, "stored_length": stored_length,
                 "input_length": input_length, "seed": c["seed"]}
    inputs = [gen_key] if gen_key else []
    if method in ("herding", "rded"):
        slice_cfg["teacher"] = Teacher.from_trajectory(trajs[0], spec).id
        inputs.append(expert_key)
    if method == "rded":
        slice_cfg.update(c["rded"])
    if method == "edc":
        slice_cfg.update(c["edc"])
        inputs.append(expert_key)
    if method == "datm":
        slice_cfg.update(c["datm"])
        inputs.append(expert_key)
    payload = {"method": method, "config": slice_cfg,
               "train": train.fingerprint()}
    key = _hash_payload("condense", payload)

    def build(path: Path):
        if method == "random":
            out = select_random(train, ipc, stored_length, seed=c["seed"],
                                input_length=input_length)
        elif method == "herding":
            teacher = Teacher.from_trajectory(trajs[0], spec)
            out = select_herding(train, ipc, stored_length, teacher)
        elif method == "rded":
            teacher = Teacher.from_trajectory(trajs[0], spec)
            out = select_rded(train, ipc, stored_length, teacher,
                              clips_per_video=c["rded"]["clips_per_video"],
                              seed=c["seed"])
        elif method == "datm":
            init = select_random(train, ipc, stored_length, seed=c["seed"],
                                 input_length=input_length)
            tm = TmConfig(**{k: v for k, v in c["datm"].items()})
            out = run_datm(trajs, init, tm, seed=c["seed"])
        elif method == "edc":
            init = select_random(train, ipc, stored_length, seed=c["seed"],
                                 input_length=input_length)
            opts = dict(c["edc"])
            count = opts.pop("networks")
            nets = [Teacher.from_trajectory(t, spec) for t in trajs[:count]]
            out = run_edc(train, DmConfig(**opts), init, nets, seed=c["seed"])
        else:
            raise ConfigError(f"unknown method {method!r}")
        write_dataset(out, path / "condensed")

    stage_id = f"condense:{method}-ipc{ipc}-t{stored_length}"
    t0 = time.time()
    path, cached = _run_stage(stage_id, cache, key, build)
    manifest.add(stage_id, key, inputs, path, cached, time.time() - t0)
    return read_dataset(path / "condensed"), key


def _reference_set(train: VideoDataset, input_length: int) -> CondensedSet:
    """The full real dataset dressed as a condensed set (upper-bound row)."""
    lengths = {it.frames.shape[0] for it in train}
    if len(lengths) != 1:
        raise ConfigError("reference row needs equal-length videos")
    per_class = {}
    for it in train:
        per_class[it.label] = per_class.get(it.label, 0) + 1
    if len(set(per_class.values())) != 1:
        raise ConfigError("reference row needs a balanced dataset")
    stored = lengths.pop()
    return CondensedSet(
        items=list(train.items), class_names=train.class_names,
        ipc=next(iter(per_class.values())),
        plan=default_plan(stored, input_length),
        labeling="hard", provenance={"method": "full"},
    )


def _evaluate_one(cfg, cache, manifest, condensed, cond_key, val, trajs,
                  expert_key, method, ipc, stored_length, labeling):
    ev = cfg["evaluate"]
    spec = model_spec(cfg, val.num_classes)
    teacher = Teacher.from_trajectory(trajs[0], spec) \
        if labeling in ("soft", "multi_sl") else None
    eval_cfg = EvalConfig(
        labeling=labeling, loss=ev["loss"], epochs=ev["epochs"],
        base_batch=ev["base_batch"], lr=ev["lr"],
        augmentation=tuple(ev["augmentation"]),
        crop_scale=tuple(ev["crop_scale"]),
        seeds=tuple(ev["seeds"]), metric=ev["metric"],
        teacher=teacher.id if teacher else None,
    )
    payload = {"eval": eval_cfg.to_dict(), "condensed": condensed.fingerprint(),
               "val": val.fingerprint(), "spec": spec.hash()}
    key = _hash_payload("evaluate", payload)

    def build(path: Path):
        report = evaluate(condensed, spec, eval_cfg, val, teacher=teacher)
        (path / "report.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=1))
        rows = [{"method": method, "category": CATEGORIES[method],
                 "ipc": ipc, "stored_length": stored_length,
                 "labeling": labeling, "seed": s, "accuracy": acc,
                 "metric": report.metric}
                for s, acc in zip(report.seeds, report.accuracies)]
        (path / "rows.json").write_text(json.dumps(rows, sort_keys=True))

    stage_id = f"evaluate:{method}-ipc{ipc}-t{stored_length}-{labeling}"
    inputs = [k for k in (cond_key, expert_key) if k]
    t0 = time.time()
    path, cached = _run_stage(stage_id, cache, key, build)
    manifest.add(stage_id, key, inputs, path, cached, time.time() - t0)
    return json.loads((path / "rows.json").read_text())


# ---------------------------------------------------------------------------
# results table


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def render_table(results: list) -> str:
    """Aligned text table, methods grouped by category.

    Within each (ipc, T_c, labeling) group the best mean per category is
    underlined (_x_) and the best across selection and distillation is
    starred (**x**); exact ties go to the earlier-listed method and every
    tied row is flagged. The reference row never competes.
    """
    if not results:
        raise ConfigError("no results to render")
    groups = {}
    for row in results:
        gkey = (row["ipc"], row["stored_length"], row["labeling"])
        mkey = row["method"]
        groups.setdefault(gkey, {}).setdefault(mkey, []).append(row)

    lines = []
    header = (f"{'category':<13}{'method':<9}{'ipc':>4}{'T_c':>5}"
              f"{'labeling':>10}  {'per-seed':<24}{'mean':>16}{'std':>7}")
    lines.append(header)
    lines.append("-" * len(header))

    def order(m):
        return METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER)

    for gkey in sorted(groups):
        ipc, stored, labeling = gkey
        methods = sorted(groups[gkey], key=order)
        means = {}
        for m in methods:
            rows = sorted(groups[gkey][m], key=lambda r: r["seed"])
            accs = [r["accuracy"] for r in rows]
            means[m] = (sum(accs) / len(accs), accs)
        best_by_cat = {}
        for m in methods:
            cat = CATEGORIES.get(m, "other")
            if cat == "reference":
                continue
            if cat not in best_by_cat or means[m][0] > means[best_by_cat[cat]][0]:
                best_by_cat[cat] = m
        competitors = [m for m in methods
                       if CATEGORIES.get(m, "other") != "reference"]
        overall = max(competitors, key=lambda m: (means[m][0], -order(m))) \
            if competitors else None
        for m in methods:
            cat = CATEGORIES.get(m, "other")
            mean, accs = means[m]
            mark = _fmt(mean)
            if m == overall:
                mark = f"**{mark}**"
            elif best_by_cat.get(cat) == m:
                mark = f"_{mark}_"
            tied = [o for o in methods if o != m and means[o][0] == mean
                    and CATEGORIES.get(o, "other") != "reference"]
            if tied and cat != "reference":
                mark += " (tied)"
            std = float(_std(accs))
            per_seed = " ".join(_fmt(a) for a in accs)
            lines.append(f"{cat:<13}{m:<9}{ipc:>4}{stored:>5}"
                         f"{labeling:>10}  {per_seed:<24}{mark:>16}{_fmt(std):>7}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def _std(xs):
    mean = sum(xs) / len(xs)
    return (sum((x - mean) ** 2 for x in xs) / len(xs)) ** 0.5


# ---------------------------------------------------------------------------
# driver


def run_pipeline(config, out_dir=None):
    """Execute every stage of a config; returns (manifest, results, table).

    `config` is a path to a YAML file or an already-validated dict. Artifacts
    land in the cache; manifest, results.json, and table.txt in out_dir.
    """
    if isinstance(config, (str, Path)):
        cfg = load_config(config)
    else:
        cfg = _merge(DEFAULT_CONFIG, config)
        validate_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cache = Cache(os.environ.get("VDC_CACHE_DIR", cfg["cache_dir"]))

    cfg_hash = _hash_payload("config", cfg)
    manifest = RunManifest(name=cfg["name"], config_hash=cfg_hash)

    train, val, gen_key = _load_datasets(cfg, cache, manifest)
    trajs, expert_key = _train_experts(cfg, cache, manifest, train, gen_key)

    results = []
    ev = cfg["evaluate"]
    for ipc, stored_length in cfg["condense"]["pairs"]:
        for method in cfg["condense"]["methods"]:
            condensed, cond_key = _condense_one(
                cfg, cache, manifest, train, trajs, expert_key, gen_key,
                method, ipc, stored_length)
            for labeling in ev["labelings"]:
                results.extend(_evaluate_one(
                    cfg, cache, manifest, condensed, cond_key, val, trajs,
                    expert_key, method, ipc, stored_length, labeling))

    ref = ev.get("reference", {})
    if ref.get("enabled"):
        full = _reference_set(train, cfg["model"]["input_length"])
        results.extend(_evaluate_one(
            cfg, cache, manifest, full, None, val, trajs, expert_key,
            "full", full.ipc, full.plan.stored_length, ref["labeling"]))

    results.sort(key=lambda r: (r["ipc"], r["stored_length"], r["labeling"],
                                METHOD_ORDER.index(r["method"]), r["seed"]))
    table = render_table(results)

    (out / "results.json").write_text(json.dumps(results, sort_keys=True,
                                                 indent=1))
    (out / "table.txt").write_text(table)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(),
                                                  sort_keys=True, indent=1))
    manifest.verify()
    return manifest, results, table
