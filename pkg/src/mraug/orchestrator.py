"""Config-driven experiment grid: data, translation, pooling, segmentation, evaluation and reports."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import yaml

from . import phantom as ph
from .embedding import pca_reduce, tsne_embed
from .errors import ConfigError, MraugError, Undefined
from .evaluate import HEADERS, METRICS, MetricsRecord, MetricsReport, evaluate_model
from .fid import TAPS, FeatureExtractor, all_tap_stats, fid
from .imaging import (DatasetManifest, TranslationMode, Volume, label_image_record, load_nifti,
                      manifest_from_volumes, read_manifest, volumes_from_manifest, write_manifest, write_nifti)
from .metrics import cov_ratio
from .segmentation import SegTrainConfig, predict_volume, train_segmentation
from .translation import (CycleTrainConfig, DcganConfig, dcgan_sample, dcgan_train, generate_synthetic,
                          train_translation)

log = logging.getLogger("mraug.orchestrator")

MODE_LABELS = {"image2image": "Image2Image", "scan2scan": "Scan2Scan", "label2image": "Label2Image",
               "syn2image": "Syn2Image"}
ALL_VENDORS = "all"

# ---------------------------------------------------------------------------
# plan


@dataclass
class Job:
    name: str
    kind: str  # data | dcgan | translate | pool | segment | embed
    params: dict = field(default_factory=dict)
    deps: list = field(default_factory=list)


@dataclass
class ExperimentPlan:
    seed: int = 0
    output: str = "runs"
    data: dict = field(default_factory=dict)
    translation: dict = field(default_factory=dict)
    segmentation: dict = field(default_factory=dict)
    dcgan: dict = field(default_factory=dict)
    jobs: list = field(default_factory=list)

    def job(self, name: str) -> Job:
        for j in self.jobs:
            if j.name == name:
                return j
        raise KeyError(name)

    def by_kind(self, kind: str) -> list[Job]:
        return [j for j in self.jobs if j.kind == kind]

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return _hash(self.to_dict())


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def _hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


_DATA_KEYS = {"phantom", "manifests"}
_TOP_KEYS = {"seed", "output", "data", "translation", "segmentation", "dcgan", "modes", "mixed", "single",
             "bounds", "eval_vendors", "embed", "pools"}


def _data_domains(data: dict) -> tuple[str, list[str], str, list[str]]:
    if "phantom" in data:
        p = data["phantom"]
        src, tgt = p.get("source", {}), p.get("target", {})
        for role, section in (("source", src), ("target", tgt)):
            for i, v in enumerate(section.get("vendors", ["GE"])):
                if v not in ph.VENDOR_STYLES[role]:
                    raise ConfigError(f"unknown vendor {v!r}; have {sorted(ph.VENDOR_STYLES[role])}",
                                      f"data.phantom.{role}.vendors[{i}]")
        return (src.get("dataset", "SRC"), list(src.get("vendors", ["GE"])),
                tgt.get("dataset", "TGT"), list(tgt.get("vendors", ["GE"])))
    m = data["manifests"]
    domains = {}
    for role in ("source", "target"):
        if role not in m:
            raise ConfigError(f"manifest for {role!r} missing", f"data.manifests.{role}")
        man = read_manifest(m[role])
        datasets = man.datasets()
        if len(datasets) != 1:
            raise ConfigError(f"{role} manifest must hold one dataset, has {datasets}", f"data.manifests.{role}")
        domains[role] = (datasets[0], [k.split(":", 1)[1] for k in man.keys()])
    return domains["source"][0], domains["source"][1], domains["target"][0], domains["target"][1]


def plan_from_dict(cfg: dict | None) -> ExperimentPlan:
    """Expand mode shorthands into the explicit job grid."""
    cfg = copy.deepcopy(cfg or {})
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a mapping", "<root>")
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "<root>")
    seed = int(cfg.get("seed", 0))
    plan = ExperimentPlan(seed=seed, output=str(cfg.get("output", "runs")),
                          translation=dict(cfg.get("translation") or {}),
                          segmentation=dict(cfg.get("segmentation") or {}),
                          dcgan=dict(cfg.get("dcgan") or {}))
    _check_section(plan.translation, CycleTrainConfig, "translation")
    _check_section(plan.segmentation, SegTrainConfig, "segmentation")
    _check_section({k: v for k, v in plan.dcgan.items() if k != "samples"}, DcganConfig, "dcgan")

    modes = cfg.get("modes") or []
    if not modes and not cfg.get("pools") and not cfg.get("bounds", "data" in cfg):
        return plan  # nothing to run
    data = cfg.get("data")
    if not isinstance(data, dict) or not set(data) & _DATA_KEYS:
        raise ConfigError("a 'phantom' or 'manifests' data section is required", "data")
    plan.data = data
    src_ds, src_vendors, tgt_ds, tgt_vendors = _data_domains(data)
    eval_vendors = cfg.get("eval_vendors", ALL_VENDORS)
    if eval_vendors == ALL_VENDORS:
        eval_vendors = list(tgt_vendors)
    for i, v in enumerate(eval_vendors):
        if v not in tgt_vendors:
            raise ConfigError(f"unknown target vendor {v!r}; have {tgt_vendors}", f"eval_vendors[{i}]")
    eval_keys = [f"{tgt_ds}:{v}" for v in eval_vendors]

    jobs = [Job("data", "data", {"config": data, "seed": seed})]
    mixed = bool(cfg.get("mixed", True))
    single = bool(cfg.get("single", True))
    for i, mode in enumerate(modes):
        try:
            mode = TranslationMode.parse(mode).value
        except MraugError as e:
            raise ConfigError(str(e), f"modes[{i}]") from None
        members = {v: [] for v in tgt_vendors}
        if mode == "syn2image":
            jobs.append(Job("dcgan", "dcgan", {"seed": seed}, ["data"]))
        for t in tgt_vendors:
            target = f"{tgt_ds}:{t}"
            if mode == "scan2scan":
                sources = [f"{src_ds}:{s}" for s in src_vendors]
            elif mode == "syn2image":
                sources = ["dcgan"]
            else:
                sources = [src_ds]
            for s in sources:
                name = f"translate/{mode}/{s.replace(':', '-')}_to_{t}"
                deps = ["data"] + (["dcgan"] if mode == "syn2image" else [])
                jobs.append(Job(name, "translate", {"mode": mode, "source": s, "target": target}, deps))
                members[t].append(name)
        if single:
            for t in tgt_vendors:
                if t in eval_vendors:
                    jobs.append(Job(f"pool/{mode}/{t}", "pool", {"mode": mode, "kind": "single", "vendor": t},
                                    members[t]))
        if mixed:
            jobs.append(Job(f"pool/{mode}/mixed", "pool", {"mode": mode, "kind": "mixed"},
                            [n for t in tgt_vendors for n in members[t]]))

    for k, pool in enumerate(cfg.get("pools") or []):
        loc = f"pools[{k}]"
        if not isinstance(pool, dict) or "name" not in pool or "members" not in pool:
            raise ConfigError("pool needs 'name' and 'members'", loc)
        jobs.append(Job(f"pool/custom/{pool['name']}", "pool",
                        {"mode": pool.get("mode", "custom"), "kind": "custom"},
                        [m if "/" in m else f"pool/custom/{m}" for m in pool["members"]]))

    for pool in [j for j in jobs if j.kind == "pool"]:
        vendors = [pool.params["vendor"]] if pool.params.get("kind") == "single" else eval_vendors
        jobs.append(Job("segment/" + pool.name.split("/", 1)[1], "segment",
                        {"train": "pool", "eval": [f"{tgt_ds}:{v}" for v in vendors], "mode": pool.params["mode"],
                         "kind": pool.params["kind"]}, [pool.name]))
    if cfg.get("bounds", True):
        jobs.append(Job("segment/lower", "segment", {"train": "source", "eval": eval_keys, "mode": "lower",
                                                     "kind": "bound"}, ["data"]))
        jobs.append(Job("segment/upper", "segment", {"train": "target_train", "eval": eval_keys,
                                                     "mode": "upper", "kind": "bound"}, ["data"]))
    embed = cfg.get("embed")
    if embed:
        pools = [j.name for j in jobs if j.kind == "pool" and j.params.get("kind") == "mixed"]
        jobs.append(Job("embed", "embed", dict(embed) if isinstance(embed, dict) else {}, ["data"] + pools))

    plan.jobs = jobs
    _validate_graph(plan)
    return plan


def _check_section(section: dict, cls, location: str):
    known = set(cls.__dataclass_fields__)
    bad = set(section) - known
    if bad:
        raise ConfigError(f"unknown keys {sorted(bad)}; allowed {sorted(known)}", location)
    try:
        cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), location) from None


def _validate_graph(plan: ExperimentPlan):
    names = [j.name for j in plan.jobs]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ConfigError(f"duplicate job names {sorted(dupes)}", "jobs")
    known = set(names)
    for j in plan.jobs:
        for d in j.deps:
            if d not in known:
                raise ConfigError(f"{j.name} depends on unknown job {d!r}", j.name)
    plan.jobs = topological(plan.jobs)


def topological(jobs: list[Job]) -> list[Job]:
    by_name = {j.name: j for j in jobs}
    state: dict[str, int] = {}
    order: list[Job] = []

    def visit(name, path):
        s = state.get(name, 0)
        if s == 1:
            cycle = path[path.index(name):] + [name]
            raise ConfigError("cyclic dependency " + " -> ".join(cycle), name)
        if s == 2:
            return
        state[name] = 1
        for d in by_name[name].deps:
            visit(d, path + [name])
        state[name] = 2
        order.append(by_name[name])

    for j in jobs:
        visit(j.name, [])
    return order


def plan_from_config(path) -> ExperimentPlan:
    path = Path(path)
    try:
        cfg = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config file not found", str(path)) from None
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"unparseable YAML: {getattr(e, 'problem', e)}", where) from None
    return plan_from_dict(cfg)


def expected_counts(plan: ExperimentPlan, source_counts: dict[str, int], target_counts: dict[str, int],
                    synthetic: int | None = None) -> dict[str, dict]:
    """Image counts of every translation job and pool implied by per-vendor manifest sizes.

    Translated sets keep the size of their source (one output per input);
    DCGAN sets hold ``synthetic`` samples (the ``dcgan.samples`` config value by default).
    """
    synthetic = int(plan.dcgan.get("samples", 5000)) if synthetic is None else synthetic
    out = {"translate": {}, "pool": {}}
    sizes = {}
    for job in plan.jobs:
        if job.kind == "translate":
            src = job.params["source"]
            if src == "dcgan":
                n = synthetic
            elif ":" in src:
                n = source_counts[src.split(":", 1)[1]]
            else:
                n = sum(source_counts.values())
            sizes[job.name] = n
            out["translate"][job.name] = (n, target_counts[job.params["target"].split(":", 1)[1]])
        elif job.kind == "pool":
            sizes[job.name] = sum(sizes[d] for d in job.deps)
            out["pool"][job.name] = sizes[job.name]
    return out


# ---------------------------------------------------------------------------
# ledger


@dataclass
class RunLedger:
    config_hash: str
    seed: int
    jobs: dict = field(default_factory=dict)
    path: str | None = None

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "jobs": self.jobs}

    def save(self, path=None) -> Path:
        path = Path(path or self.path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        self.path = str(path)
        return path

    @classmethod
    def load(cls, path) -> "RunLedger":
        d = json.loads(Path(path).read_text())
        return cls(d["config_hash"], d["seed"], d.get("jobs", {}), str(path))

    def status(self, name: str) -> str | None:
        return self.jobs.get(name, {}).get("status")

    def failed(self) -> list[str]:
        return [n for n, j in self.jobs.items() if j.get("status") == "failed"]


def _job_hash(job: Job, plan: ExperimentPlan, upstream: dict[str, str]) -> str:
    section = {"translate": plan.translation, "segment": plan.segmentation, "dcgan": plan.dcgan}.get(job.kind, {})
    return _hash({"job": asdict(job), "section": section, "seed": plan.seed, "data": plan.data,
                  "upstream": {d: upstream[d] for d in job.deps}})


# ---------------------------------------------------------------------------
# execution


class _Context:
    """Lazy access to the data products shared by jobs of one run."""

    def __init__(self, root: Path, ledger: RunLedger):
        self.root = root
        self.ledger = ledger
        self._cache: dict = {}

    def artifact(self, job: str, key: str) -> Path:
        return self.root / self.ledger.jobs[job]["artifacts"][key]

    def manifest(self, job: str, key: str) -> DatasetManifest:
        cache_key = (job, key)
        if cache_key not in self._cache:
            self._cache[cache_key] = read_manifest(self.artifact(job, key))
        return self._cache[cache_key]

    def eval_volumes(self) -> list[Volume]:
        if "volumes" not in self._cache:
            index = json.loads(self.artifact("data", "volumes").read_text())
            vols = []
            base = self.artifact("data", "volumes").parent
            for item in index:
                img = load_nifti(base / item["image"])
                brain = load_nifti(base / item["brain"]).voxels > 0.5
                lesion = load_nifti(base / item["lesion"]).voxels > 0.5
                vols.append(Volume(img.voxels, img.spacing, brain, lesion,
                                   {k: item[k] for k in ("dataset", "vendor", "subject")}))
            self._cache["volumes"] = vols
        return self._cache["volumes"]


def _write_volumes(volumes, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for v in volumes:
        stem = str(v.meta["subject"])
        entry = {"dataset": v.meta["dataset"], "vendor": v.meta["vendor"], "subject": stem}
        for key, arr in (("image", v.voxels), ("brain", v.brain_mask.astype(np.uint8)),
                         ("lesion", v.lesion_mask.astype(np.uint8))):
            name = f"{stem}_{key}.nii.gz"
            write_nifti(out / name, arr, v.spacing)
            entry[key] = name
        index.append(entry)
    path = out / "index.json"
    path.write_text(json.dumps(index, indent=1) + "\n")
    return path


def _run_data(job: Job, plan: ExperimentPlan, out: Path, ctx) -> dict:
    data = plan.data
    if "phantom" in data:
        p = dict(data["phantom"])
        spec_keys = {"subjects", "slices_per_subject", "lesion_count", "lesion_radius", "shape", "spacing"}
        spec = ph.PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items() if k in spec_keys},
                              seed=plan.seed)
        src_ds = p.get("source", {}).get("dataset", "SRC")
        tgt_ds = p.get("target", {}).get("dataset", "TGT")
        source, target, target_train, eval_vols = DatasetManifest(), DatasetManifest(), DatasetManifest(), []
        for k, v in enumerate(p.get("source", {}).get("vendors", ["GE"])):
            style = ph.VENDOR_STYLES["source"][v]
            for r in ph.make_phantom_domain(ph.with_seed(spec, plan.seed * 100 + k), style, src_ds, v).records():
                source.add(r)
        for k, v in enumerate(p.get("target", {}).get("vendors", ["GE"])):
            style = ph.VENDOR_STYLES["target"][v]
            vols = ph.phantom_volumes(ph.with_seed(spec, plan.seed * 100 + 50 + k), style, tgt_ds, v)
            eval_vols += vols
            for r in manifest_from_volumes(vols, validation_only=True).records():
                target.add(r)
            for r in ph.make_phantom_domain(ph.with_seed(spec, plan.seed * 100 + 75 + k), style, tgt_ds,
                                            v).records():
                target_train.add(r)
    else:
        m = data["manifests"]
        source, target = read_manifest(m["source"]), read_manifest(m["target"])
        target = DatasetManifest.from_records([_as_validation(r) for r in target.records()])
        target_train = read_manifest(m["target_train"]) if m.get("target_train") else DatasetManifest()
        eval_vols = volumes_from_manifest(target)
    arts = {"source": write_manifest(out / "source.jsonl", source),
            "target": write_manifest(out / "target.jsonl", target),
            "target_train": write_manifest(out / "target_train.jsonl", target_train),
            "volumes": _write_volumes(eval_vols, out / "volumes")}
    return {k: v for k, v in arts.items()}


def _as_validation(r):
    r.validation_only = True
    return r


def _dcgan_config(plan: ExperimentPlan) -> DcganConfig:
    return DcganConfig(**{k: v for k, v in plan.dcgan.items() if k != "samples"},
                       **({} if "seed" in plan.dcgan else {"seed": plan.seed}))


def _run_dcgan(job: Job, plan: ExperimentPlan, out: Path, ctx) -> dict:
    source = ctx.manifest("data", "source")
    cfg = _dcgan_config(plan)
    result = dcgan_train(source, cfg, out, log=log.info)
    samples = dcgan_sample(result.generator, int(plan.dcgan.get("samples", 5000)), seed=cfg.seed + 1)
    return {"checkpoint": out / "final.dsfg", "history": out / "history.csv",
            "samples": write_manifest(out / "samples.jsonl", samples)}


def _translation_config(plan: ExperimentPlan) -> CycleTrainConfig:
    t = dict(plan.translation)
    t.setdefault("seed", plan.seed)
    return CycleTrainConfig(**t)


def _run_translate(job: Job, plan: ExperimentPlan, out: Path, ctx) -> dict:
    mode = TranslationMode.parse(job.params["mode"])
    target = ctx.manifest("data", "target").records(job.params["target"])
    if mode is TranslationMode.SYN2IMAGE:
        source = ctx.manifest("dcgan", "samples").records()
    else:
        manifest = ctx.manifest("data", "source")
        keys = [k for k in manifest.keys() if k == job.params["source"] or k.split(":")[0] == job.params["source"]]
        source = [r for k in keys for r in manifest.records(k)]
        if mode is TranslationMode.LABEL2IMAGE:
            source = [label_image_record(r) for r in source]
    cfg = _translation_config(plan)
    result = train_translation(cfg, source, target, out, log=log.info, mode=mode,
                               meta={"source": job.params["source"], "target": job.params["target"]})
    dataset, vendor = job.params["target"].split(":", 1)
    synthetic = generate_synthetic(result.g_s2t, source, mode, result.meta["generator_id"],
                                   dataset=f"SYN-{mode.value}", vendor=vendor)
    extractor = FeatureExtractor(seed=0)
    ref = all_tap_stats(target, extractor)
    translated = all_tap_stats(synthetic, extractor)
    untranslated = all_tap_stats(source, extractor)
    scores = {"translated": {str(t): fid(translated[t], ref[t]) for t in TAPS},
              "source": {str(t): fid(untranslated[t], ref[t]) for t in TAPS}}
    (out / "fid.json").write_text(json.dumps(scores, indent=1, sort_keys=True) + "\n")
    return {"checkpoint": out / "final.dsfg", "history": out / "history.csv", "fid": out / "fid.json",
            "synthetic": write_manifest(out / "synthetic.jsonl", synthetic)}


def _run_pool(job: Job, plan: ExperimentPlan, out: Path, ctx) -> dict:
    members, count = [], 0
    for dep in job.deps:
        arts = ctx.ledger.jobs[dep]["artifacts"]
        key = "synthetic" if "synthetic" in arts else "members"
        if key == "members":
            members += json.loads((ctx.root / arts["members"]).read_text())["members"]
        else:
            members.append(arts["synthetic"])
        count += ctx.ledger.jobs[dep].get("count", 0)
    total = sum(len(read_manifest(ctx.root / m)) for m in members)
    path = out / "members.json"
    path.write_text(json.dumps({"members": members, "count": total}, indent=1) + "\n")
    return {"members": path, "_count": total}


def _seg_config(plan: ExperimentPlan) -> SegTrainConfig:
    s = dict(plan.segmentation)
    s.setdefault("seed", plan.seed)
    return SegTrainConfig(**s)


def _run_segment(job: Job, plan: ExperimentPlan, out: Path, ctx) -> dict:
    p = job.params
    if p["train"] == "pool":
        members = json.loads(ctx.artifact(job.deps[0], "members").read_text())["members"]
        records = [r for m in members for r in read_manifest(ctx.root / m).records()]
    else:
        records = ctx.manifest("data", p["train"]).records()
        if not records:
            raise MraugError(f"no records available for the {p['train']} training set")
    result = train_segmentation(_seg_config(plan), records, out, meta={"job": job.name}, log=log.info)
    volumes = [v for v in ctx.eval_volumes() if f"{v.meta['dataset']}:{v.meta['vendor']}" in p["eval"]]
    report = evaluate_model(partial(predict_volume, result.params), volumes, name=job.name)
    (out / "consumed.json").write_text(json.dumps(dict(sorted(result.consumed.items())), indent=1) + "\n")
    (out / "report.txt").write_text(report.to_text())
    return {"checkpoint": out / "final.dsfg", "history": out / "history.csv",
            "report": report.write_csv(out / "report.csv"), "report_text": out / "report.txt",
            "consumed": out / "consumed.json"}


def _run_embed(job: Job, plan: ExperimentPlan, out: Path, ctx) -> dict:
    per_set = int(job.params.get("per_set", 60))
    perplexity = float(job.params.get("perplexity", 30))
    rng = np.random.default_rng(plan.seed)
    sets = {"target": ctx.manifest("data", "target").records()}
    for dep in job.deps[1:]:
        members = json.loads(ctx.artifact(dep, "members").read_text())["members"]
        sets[MODE_LABELS.get(dep.split("/")[1], dep)] = [r for m in members for r in read_manifest(ctx.root / m).records()]
    images, tags = [], []
    for name, recs in sets.items():
        idx = np.sort(rng.choice(len(recs), size=min(per_set, len(recs)), replace=False))
        images += [recs[i].image for i in idx]
        tags += [name] * len(idx)
    feats = FeatureExtractor(seed=0).features(np.stack(images))[2048]
    k = min(int(job.params.get("pca", 1024)), len(feats) - 1, feats.shape[1])
    reduced = pca_reduce(feats, k)
    perplexity = min(perplexity, (len(reduced) - 1) / 3.0)
    res = tsne_embed(reduced, perplexity=perplexity, iterations=int(job.params.get("iterations", 1000)),
                     seed=plan.seed, tags=tags)
    return {"embedding": res.write_csv(out / "embedding.csv")}


_RUNNERS = {"data": _run_data, "dcgan": _run_dcgan, "translate": _run_translate, "pool": _run_pool,
            "segment": _run_segment, "embed": _run_embed}


def _job_dir(job: Job, digest: str) -> str:
    return f"jobs/{job.name.replace('/', '__')}-{digest[:12]}"


def _artifacts_exist(root: Path, entry: dict) -> bool:
    return all((root / p).exists() for p in entry.get("artifacts", {}).values())


def run_plan(plan: ExperimentPlan, out=None, resume: bool = False) -> RunLedger:
    """Execute jobs in dependency order, recording every artifact in ``ledger.json``.

    With ``resume`` a job whose hash matches a completed ledger entry is skipped.
    A failing job blocks its dependents; independent jobs still run.
    """
    root = Path(out or plan.output)
    root.mkdir(parents=True, exist_ok=True)
    ledger_path = root / "ledger.json"
    previous = RunLedger.load(ledger_path) if resume and ledger_path.exists() else None
    ledger = RunLedger(plan.config_hash(), plan.seed, {}, str(ledger_path))
    ctx = _Context(root, ledger)
    hashes: dict[str, str] = {}
    for job in plan.jobs:
        digest = _job_hash(job, plan, hashes)
        hashes[job.name] = digest
        prev = previous.jobs.get(job.name) if previous else None
        if prev and prev.get("hash") == digest and prev.get("status") == "done" and _artifacts_exist(root, prev):
            ledger.jobs[job.name] = prev
            log.info("skip %s (unchanged)", job.name)
            continue
        blocked = [d for d in job.deps if ledger.status(d) != "done"]
        entry = {"kind": job.kind, "hash": digest, "dir": _job_dir(job, digest), "deps": list(job.deps),
                 "seed": plan.seed}
        if blocked:
            entry.update(status="blocked", blocked_by=blocked)
            ledger.jobs[job.name] = entry
            ledger.save()
            continue
        job_dir = root / entry["dir"]
        job_dir.mkdir(parents=True, exist_ok=True)
        log.info("run %s", job.name)
        started = time.perf_counter()
        try:
            arts = _RUNNERS[job.kind](job, plan, job_dir, ctx)
        except Exception as e:  # recorded in the ledger; dependents are blocked
            log.error("job %s failed: %s", job.name, e)
            entry.update(status="failed", error=f"{type(e).__name__}: {e}")
        else:
            count = arts.pop("_count", None)
            entry.update(status="done", artifacts={k: str(Path(v).relative_to(root)) for k, v in arts.items()})
            if count is not None:
                entry["count"] = count
            entry["seconds"] = round(time.perf_counter() - started, 1)
        ledger.jobs[job.name] = entry
        ledger.save()
    ledger.save()
    return ledger


# ---------------------------------------------------------------------------
# COV and reports


def compare_cov(reports: dict[str, dict[str, float]], lower: str = "lower") -> dict[str, float]:
    """COV of per-vendor mean Dice for each mode; ``nan`` marks undefined entries.

    ``reports`` maps a mode name to ``{vendor: mean dice}``.
    """
    out = {}
    for mode, means in reports.items():
        values = [v for v in means.values() if v is not None and not math.isnan(v)]
        try:
            if len(values) != len(means):
                raise Undefined("missing vendor")
            out[mode] = cov_ratio(values)
        except Undefined:
            out[mode] = math.nan
    if lower in reports:
        out.setdefault(lower, math.nan)
    return out


def _load_report(path: Path) -> MetricsReport:
    records = []
    with path.open() as f:
        for row in csv.DictReader(f):
            records.append(MetricsRecord(row["subject"], row["vendor"],
                                         **{m: float(row[HEADERS[m]]) for m in METRICS}))
    return MetricsReport(records)


def _row_label(job_name: str, job: dict) -> str:
    tail = job_name.split("/", 1)[1]
    if tail in ("lower", "upper"):
        return tail.capitalize()
    mode, kind = tail.split("/", 1)
    label = MODE_LABELS.get(mode, mode)
    return f"{label} (mixed)" if kind == "mixed" else label


def _fmt(a) -> str:
    return "nan" if math.isnan(a.mean) else f"{a.mean:.4f}±{a.std:.4f}"


def _savefig(fig, path: Path):
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})


def emit_report_bundle(ledger: RunLedger | str | Path, out=None) -> dict[str, Path]:
    """Metric, FID and COV tables plus loss-curve and embedding plots from a completed ledger."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not isinstance(ledger, RunLedger):
        ledger = RunLedger.load(ledger)
    root = Path(ledger.path).parent
    out = Path(out or root / "report")
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    jobs = ledger.jobs
    seg = {n: j for n, j in sorted(jobs.items()) if j["kind"] == "segment" and j.get("status") == "done"}
    order = sorted(seg, key=lambda n: ({"Lower": 0, "Upper": 1}.get(_row_label(n, seg[n]), 2), n))

    reports = {n: _load_report(root / seg[n]["artifacts"]["report"]) for n in order}
    path = out / "metrics_table.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "vendor", *[HEADERS[m] for m in METRICS], "excluded"])
        for n in order:
            rep = reports[n]
            for vendor in rep.vendors():
                agg = rep.aggregate(vendor)
                w.writerow([_row_label(n, seg[n]), vendor, *[_fmt(agg[m]) for m in METRICS],
                            sum(agg[m].excluded for m in METRICS)])
    files["metrics"] = path

    path = out / "fid_table.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["translation", "set", *[str(t) for t in TAPS]])
        for n, j in sorted(jobs.items()):
            if j["kind"] == "translate" and j.get("status") == "done":
                scores = json.loads((root / j["artifacts"]["fid"]).read_text())
                for which in ("source", "translated"):
                    w.writerow([n.split("/", 1)[1], which, *[f"{scores[which][str(t)]:.4f}" for t in TAPS]])
    files["fid"] = path

    means = {}
    for n in order:
        label = _row_label(n, seg[n])
        if label in ("Upper",) or not (label == "Lower" or label.endswith("(mixed)")):
            continue
        means[label] = reports[n].vendor_means("dice")
    covs = compare_cov(means, lower="Lower")
    path = out / "cov_table.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "vendors", "cov", "lower_cov"])
        for label, value in covs.items():
            w.writerow([label, len(means.get(label, {})), f"{value:.6f}", f"{covs.get('Lower', math.nan):.6f}"])
    files["cov"] = path

    curves = [(n, j) for n, j in sorted(jobs.items()) if j.get("status") == "done" and "history" in j.get("artifacts", {})]
    if curves:
        fig, axes = plt.subplots(1, 2, figsize=(11, 4))
        for n, j in curves:
            with (root / j["artifacts"]["history"]).open() as f:
                rows = list(csv.DictReader(f))
            if j["kind"] == "translate":
                axes[0].plot([int(r["epoch"]) for r in rows],
                             [float(r["cycle_s"]) + float(r["cycle_t"]) for r in rows], label=n.split("/", 1)[1])
            elif j["kind"] == "segment":
                axes[1].plot([int(r["epoch"]) for r in rows], [float(r["loss"]) for r in rows],
                             label=_row_label(n, j))
        axes[0].set(title="cycle loss", xlabel="epoch")
        axes[1].set(title="generalized Dice loss", xlabel="epoch")
        for ax in axes:
            if ax.lines:
                ax.legend(fontsize=6)
        fig.tight_layout()
        path = out / "loss_curves.png"
        _savefig(fig, path)
        plt.close(fig)
        files["loss_curves"] = path

    emb = jobs.get("embed")
    if emb and emb.get("status") == "done":
        with (root / emb["artifacts"]["embedding"]).open() as f:
            rows = list(csv.DictReader(f))
        fig, ax = plt.subplots(figsize=(5, 5))
        for tag in dict.fromkeys(r["domain"] for r in rows):
            pts = np.array([[float(r["x"]), float(r["y"])] for r in rows if r["domain"] == tag])
            ax.scatter(pts[:, 0], pts[:, 1], s=6, label=tag)
        ax.legend(fontsize=7)
        ax.set(title="t-SNE of tap-2048 features")
        path = out / "embedding.png"
        _savefig(fig, path)
        plt.close(fig)
        files["embedding"] = path
    return files
