"""Pipeline stages over a run directory, each leaving a hash-chained manifest.

Layout of a run directory::

    config.json          resolved settings
    events.jsonl         input log (copied or generated)
    split.json vocab.json
    backbone.ckpt memory.bin annotations.jsonl retriever.ckpt
    reports/<variant>.json  compare/
    manifests/<stage>.json
"""

from __future__ import annotations

import json
import logging
import os
import time

from . import config as C
from . import container
from . import data as D
from .annotate import annotate_dataset
from .backbone import Backbone, ModelConfig, PromptSet, TrainConfig, train_backbone
from .evaluation import VARIANTS, MetricsReport, compare, run_eval, write_audit_csv, write_table_csv
from .memory import MemoryEncoder, build_banks, load_banks, save_banks
from .retriever import Retriever, RetrieverTrainConfig, train_retriever
from .vocab import ItemVocabulary

log = logging.getLogger(__name__)

# artifact -> stage that produces it
PRODUCER = {
    "events.jsonl": "prepare-data",
    "split.json": "prepare-data",
    "vocab.json": "prepare-data",
    "backbone.ckpt": "train-backbone",
    "memory.bin": "build-memory",
    "annotations.jsonl": "annotate",
    "retriever.ckpt": "train-retriever",
}
STAGE_INPUTS = {
    "prepare-data": (),
    "train-backbone": ("split.json", "vocab.json"),
    "build-memory": ("split.json", "backbone.ckpt"),
    "annotate": ("split.json", "backbone.ckpt", "memory.bin"),
    "train-retriever": ("split.json", "backbone.ckpt", "memory.bin", "annotations.jsonl"),
}


class StaleArtifactError(RuntimeError):
    pass


class DependencyError(RuntimeError):
    pass


# -- manifests ------------------------------------------------------------------


def _path(run, name):
    return os.path.join(run, name)


def manifest_path(run, stage):
    return os.path.join(run, "manifests", f"{stage}.json")


def read_manifest(run, stage):
    p = manifest_path(run, stage)
    if not os.path.exists(p):
        return None
    with open(p) as f:
        return json.load(f)


def write_manifest(run, stage, cfg, inputs, outputs, timings, extra=None):
    m = {
        "stage": stage,
        "config_hash": C.config_hash(cfg),
        "config": cfg,
        "inputs": {k: container.file_hash(_path(run, k)) for k in inputs},
        "outputs": {k: container.file_hash(_path(run, k)) for k in outputs},
        "timings": timings,
    }
    if extra:
        m.update(extra)
    container.atomic_write(manifest_path(run, stage), json.dumps(m, sort_keys=True, indent=1) + "\n")
    return m


def check_artifact(run, name):
    """Raise unless ``name`` exists, matches its producer's record, and its producer's inputs are current."""
    stage = PRODUCER[name]
    path = _path(run, name)
    if not os.path.exists(path):
        raise DependencyError(f"missing {name}; run `{stage}` first")
    m = read_manifest(run, stage)
    if m is None:
        raise DependencyError(f"{name} has no manifest; rerun `{stage}`")
    if m["outputs"].get(name) != container.file_hash(path):
        raise StaleArtifactError(f"{name} changed since `{stage}` wrote it; rerun `{stage}`")
    for dep, h in m["inputs"].items():
        dp = _path(run, dep)
        if not os.path.exists(dp) or container.file_hash(dp) != h:
            raise StaleArtifactError(f"{name} is stale: {dep} changed after `{stage}` ran; rerun `{stage}`")


def check_inputs(run, stage):
    for name in STAGE_INPUTS[stage]:
        check_artifact(run, name)


def verify(run):
    """Every manifest's outputs match the files and its inputs match the current files."""
    problems = []
    mdir = os.path.join(run, "manifests")
    if not os.path.isdir(mdir):
        return [f"no manifests under {run}"]
    for fname in sorted(os.listdir(mdir)):
        with open(os.path.join(mdir, fname)) as f:
            m = json.load(f)
        for kind in ("outputs", "inputs"):
            for name, h in m[kind].items():
                p = _path(run, name)
                if not os.path.exists(p):
                    problems.append(f"{m['stage']}: {kind[:-1]} {name} is missing")
                elif container.file_hash(p) != h:
                    problems.append(f"{m['stage']}: {kind[:-1]} {name} does not match its recorded hash")
    return problems


# -- helpers ----------------------------------------------------------------------


def load_config(run):
    with open(_path(run, "config.json")) as f:
        return C.resolve(json.load(f))


def workers_of(cfg):
    return cfg["workers"] or os.cpu_count() or 1


def synthetic_config(cfg):
    return D.SyntheticConfig(
        n_users=cfg["synthetic.n_users"], n_item_pairs=cfg["synthetic.n_item_pairs"], n_filler=cfg["synthetic.n_filler"],
        seq_len=cfg["synthetic.seq_len"], anchor_range=(cfg["synthetic.anchor_lo"], cfg["synthetic.anchor_hi"]),
        p_long=cfg["synthetic.p_long"], branching=cfg["synthetic.branching"], seed=cfg["seed"])


def model_config(cfg, vocab_size):
    return ModelConfig(vocab_size=vocab_size, d_model=cfg["model.d_model"], n_layers=cfg["model.n_layers"],
                       split_layer=cfg["model.split_layer"], n_heads=cfg["model.n_heads"], ff_dim=cfg["model.ff_dim"],
                       max_seq_len=cfg["model.max_seq_len"], dropout=cfg["model.dropout"])


def load_split(run):
    with open(_path(run, "split.json")) as f:
        return D.split_from_json(json.load(f))


def _encoder(cfg, model):
    return MemoryEncoder(model, cfg["data.short_window"], single_item=cfg["memory.single_item"],
                         pooling=cfg["memory.pooling"], workers=workers_of(cfg))


def _load_memory(run, cfg):
    model = Backbone.load(_path(run, "backbone.ckpt"))
    ckpt = container.file_hash(_path(run, "backbone.ckpt"))
    banks, _ = load_banks(_path(run, "memory.bin"), ckpt)
    enc = _encoder(cfg, model)
    for (user, _), bank in banks.items():
        for e in bank.entries:
            enc.cache[(user, e.index)] = e.vector
    return model, ckpt, banks, enc


# -- stages -------------------------------------------------------------------------


def prepare_data(run, cfg, input_path=None, synthetic=False):
    if bool(input_path) == bool(synthetic):
        raise C.ConfigError("give exactly one of --input or --synthetic")
    t0 = time.perf_counter()
    os.makedirs(run, exist_ok=True)
    container.atomic_write(_path(run, "config.json"), json.dumps(cfg, sort_keys=True, indent=1) + "\n")
    if synthetic:
        scfg = synthetic_config(cfg)
        events = D.generate_synthetic(scfg)
        train_start, bounds = scfg.boundaries()
    else:
        events = D.ingest(input_path)
        if not events:
            raise D.EmptyDatasetError(f"{input_path} holds no events")
    seqs, vocab = D.filter_and_sequence(events, cfg["data.min_item_interactions"], cfg["data.min_seq_len"])
    if not synthetic:
        train_start, bounds = D.default_boundaries([e for s in seqs for e in s.events])
    split = D.split_chronological(seqs, bounds, cfg["data.short_window"], cfg["data.max_len"], train_start)
    D.write_events(_path(run, "events.jsonl"), [e for s in seqs for e in s.events])
    obj = D.split_to_json(split)
    obj["train_start"] = train_start
    container.atomic_write(_path(run, "split.json"), json.dumps(obj, sort_keys=True) + "\n")
    vocab.save(_path(run, "vocab.json"))
    counts = {"train": len(split.train), "val": len(split.val), "test": len(split.test)}
    return write_manifest(run, "prepare-data", cfg, [], ["events.jsonl", "split.json", "vocab.json"],
                          {"seconds": time.perf_counter() - t0}, {"counts": counts})


def train_backbone_stage(run, cfg):
    check_inputs(run, "train-backbone")
    t0 = time.perf_counter()
    split = load_split(run)
    vocab = ItemVocabulary.load(_path(run, "vocab.json"))
    short, T = cfg["data.short_window"], cfg["model.max_seq_len"]
    train = PromptSet(split.train, split.sequences, vocab, T, short)
    val = PromptSet(split.val, split.sequences, vocab, T, short) if split.val else None
    tcfg = TrainConfig(lr=cfg["backbone.lr"], batch_size=cfg["backbone.batch_size"],
                       max_epochs=cfg["backbone.max_epochs"], patience=cfg["backbone.patience"],
                       p_prefix=cfg["backbone.p_prefix"], min_epochs=cfg["backbone.min_epochs"])
    result = train_backbone(train, val, vocab, model_config(cfg, vocab.size), seed=cfg["seed"], tcfg=tcfg)
    result.model.save(_path(run, "backbone.ckpt"))
    return write_manifest(run, "train-backbone", cfg, STAGE_INPUTS["train-backbone"], ["backbone.ckpt"],
                          {"seconds": time.perf_counter() - t0},
                          {"best_epoch": result.best_epoch, "history": result.history})


def build_memory_stage(run, cfg):
    check_inputs(run, "build-memory")
    t0 = time.perf_counter()
    split = load_split(run)
    model = Backbone.load(_path(run, "backbone.ckpt"))
    ckpt = container.file_hash(_path(run, "backbone.ckpt"))
    enc = _encoder(cfg, model)
    samples = split.train + split.val + split.test
    banks = build_banks(samples, split.sequences, model, cfg["data.short_window"], cfg["data.max_len"], encoder=enc)
    save_banks(_path(run, "memory.bin"), banks, ckpt)
    return write_manifest(run, "build-memory", cfg, STAGE_INPUTS["build-memory"], ["memory.bin"],
                          {"seconds": time.perf_counter() - t0},
                          {"banks": len(banks), "entries": sum(len(b) for b in banks.values())})


def annotate_stage(run, cfg):
    check_inputs(run, "annotate")
    t0 = time.perf_counter()
    split = load_split(run)
    model, ckpt, banks, _ = _load_memory(run, cfg)
    model.frozen = True
    cache = os.path.join(C.cache_dir(cfg, run), "annotations-cache.jsonl")
    os.makedirs(os.path.dirname(cache), exist_ok=True)
    annotated, stats = annotate_dataset(split.train, split.sequences, banks, model, cfg["annotate.tau_label"],
                                        cache_path=cache, checkpoint_hash=ckpt, log_space=cfg["annotate.log_space"],
                                        workers=workers_of(cfg), short=cfg["data.short_window"])
    lines = [json.dumps(a.to_json(ckpt), sort_keys=True) for a in annotated]
    container.atomic_write(_path(run, "annotations.jsonl"), "".join(line + "\n" for line in lines))
    return write_manifest(run, "annotate", cfg, STAGE_INPUTS["annotate"], ["annotations.jsonl"],
                          {"seconds": time.perf_counter() - t0},
                          {"annotation_forward_passes": stats["forward_passes"], "annotation_stats": stats})


def read_annotations(run):
    from .annotate import AnnotatedSample
    out = []
    with open(_path(run, "annotations.jsonl")) as f:
        for line in f:
            if line.strip():
                out.append(AnnotatedSample.from_json(json.loads(line)))
    return out


def train_retriever_stage(run, cfg):
    check_inputs(run, "train-retriever")
    t0 = time.perf_counter()
    split = load_split(run)
    model, ckpt, banks, enc = _load_memory(run, cfg)
    model.frozen = True
    before = model.fingerprint()
    annotated = read_annotations(run)
    by_id = {s.sample_id: s for s in split.train}
    samples = [by_id[a.sample_id] for a in annotated]
    queries = enc.queries(split.sequences, samples)
    mats = [banks[(a.user, a.cut)].vectors for a in annotated]
    labels = [a.labels for a in annotated]
    rcfg = RetrieverTrainConfig(lr=cfg["retriever.lr"], batch_size=cfg["retriever.batch_size"],
                                max_epochs=cfg["retriever.max_epochs"], patience=cfg["retriever.patience"],
                                hidden=cfg["retriever.hidden"])
    val = split.val
    short = cfg["data.short_window"]

    def val_fn(retriever):
        if not val:
            return 0.0
        rep = run_eval(val, split.sequences, "learned", model, banks, enc, retriever, ks=(1,), short=short)
        return rep.metrics["recall@1"]

    result = train_retriever(queries, mats, labels, model.config.d_model, seed=cfg["seed"], cfg=rcfg, val_fn=val_fn)
    if model.fingerprint() != before:
        raise RuntimeError("backbone parameters changed during retriever training")
    result.retriever.save(_path(run, "retriever.ckpt"))
    return write_manifest(run, "train-retriever", cfg, STAGE_INPUTS["train-retriever"], ["retriever.ckpt"],
                          {"seconds": time.perf_counter() - t0},
                          {"best_epoch": result.best_epoch, "history": result.history})


def evaluate_stage(run, cfg, variant, part="test", seed=None):
    needs = ["split.json", "backbone.ckpt", "memory.bin"] + (["retriever.ckpt"] if variant == "learned" else [])
    for name in needs:
        check_artifact(run, name)
    t0 = time.perf_counter()
    split = load_split(run)
    model, ckpt, banks, enc = _load_memory(run, cfg)
    retriever = Retriever.load(_path(run, "retriever.ckpt")) if variant == "learned" else None
    seed = cfg["seed"] if seed is None else seed
    report = run_eval(split.part(part), split.sequences, variant, model, banks, enc, retriever, seed=seed,
                      ks=C.ks(cfg), workers=workers_of(cfg), short=cfg["data.short_window"])
    report.meta = {
        "config_hash": C.config_hash(cfg), "run_seed": cfg["seed"], "split": part,
        "checkpoints": {"backbone": ckpt,
                        "retriever": container.file_hash(_path(run, "retriever.ckpt")) if retriever else None},
    }
    name = f"reports/{variant}.json"
    report.save(_path(run, name))
    write_manifest(run, f"evaluate-{variant}", cfg, needs, [name], {"seconds": time.perf_counter() - t0})
    return report


def compare_stage(report_paths, out_dir):
    reports = [MetricsReport.load(p) for p in report_paths]
    comp = compare(reports)
    os.makedirs(out_dir, exist_ok=True)
    container.atomic_write(os.path.join(out_dir, "comparison.json"), json.dumps(comp, sort_keys=True, indent=1) + "\n")
    write_table_csv(os.path.join(out_dir, "table.csv"), comp)
    n = write_audit_csv(os.path.join(out_dir, "audit.csv"), reports)
    return comp, n


def run_all(run, cfg, input_path=None, synthetic=True, variants=VARIANTS):
    """Every stage in order; returns {variant: report} for the test split."""
    timings = {}
    t = time.perf_counter()
    prepare_data(run, cfg, input_path, synthetic and not input_path)
    timings["prepare-data"] = time.perf_counter() - t
    for stage, fn in (("train-backbone", train_backbone_stage), ("build-memory", build_memory_stage),
                      ("annotate", annotate_stage), ("train-retriever", train_retriever_stage)):
        t = time.perf_counter()
        fn(run, cfg)
        timings[stage] = time.perf_counter() - t
        log.info("%s done in %.1fs", stage, timings[stage])
    reports = {}
    for v in variants:
        t = time.perf_counter()
        reports[v] = evaluate_stage(run, cfg, v)
        timings[f"evaluate-{v}"] = time.perf_counter() - t
    compare_stage([_path(run, f"reports/{v}.json") for v in variants], _path(run, "compare"))
    container.atomic_write(_path(run, "timings.json"), json.dumps(timings, sort_keys=True, indent=1) + "\n")
    return reports
