"""Experiment manifests and the two-stage pipeline runner.

A manifest is a JSON object::

    {"corpus": {...} | "corpus_dir": "path",
     "lm": {"d_emb": 16, "hidden": 32},
     "policies": ["none", "rand", "ssm", "supervised-top1", "meta"],
     "policy_options": {"ssm": {...}}, "supervised": {...}, "meta": {...},
     "stage1": {...}, "stage2": {...}, "seed": 0,
     "analysis": {"fraction": 0.01}}

``stage2.seeds`` is the fine-tuning seed list; ``seed`` drives the LM
initialization, policy training, and Stage 1.
"""
import json
import logging
import os
import traceback

from . import corpus as corpus_mod
from .analysis import (mask_sample, pos_mask_distribution, sample_corpus, write_pos_csv,
                       write_zipf_csv, zipf_for)
from .diffcore import ParamStore, RngStream
from .errors import ContractViolation, EmptySample
from .lmodel import init_lm
from .masking import HEURISTICS, heuristic_policy
from .policynets import init_meta_policy, meta_policy, supervised_policy
from .trainers import (CSV_HEADER, MetaConfig, StageConfig, SupConfig, evaluate, finetune,
                       intermediate_pretrain, run_meta_training, train_supervised_policy)

log = logging.getLogger(__name__)

LEARNED = ("supervised-top1", "supervised-top5", "meta")
KNOWN_KEYS = {"corpus", "corpus_dir", "lm", "policies", "policy", "policy_options", "supervised",
              "meta", "stage1", "stage2", "seed", "analysis", "val_fraction"}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")


def desk_manifest():
    """The shipped desk-scale manifest (a fresh dict each call)."""
    return load_manifest(os.path.join(CONFIG_DIR, "desk.json"))


def load_manifest(path):
    with open(path, encoding="utf-8") as f:
        return validate_manifest(json.load(f))


def validate_manifest(m):
    unknown = set(m) - KNOWN_KEYS
    if unknown:
        raise ContractViolation(f"unknown manifest keys: {sorted(unknown)}")
    if "corpus_dir" in m and not os.path.isdir(m["corpus_dir"]):
        raise FileNotFoundError(m["corpus_dir"])
    for name in policy_grid(m):
        if name != "none" and name not in HEURISTICS and name not in LEARNED:
            raise ContractViolation(f"unknown policy {name!r}")
    StageConfig.from_dict(m.get("stage1", {}))
    StageConfig.from_dict(m.get("stage2", {}))
    return m


def policy_grid(m):
    if "policies" in m:
        grid = list(m["policies"])
    else:
        grid = [m.get("policy", "none")]
    if not grid:
        raise ContractViolation("the policy grid is empty")
    return grid


# -- corpus I/O ----------------------------------------------------------------

def write_corpus(c, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    corpus_mod.save_jsonl(c.documents, os.path.join(out_dir, "corpus.jsonl"), c.vocab)
    corpus_mod.save_jsonl(c.triplets, os.path.join(out_dir, "triplets.jsonl"), c.vocab)
    c.vocab.save(os.path.join(out_dir, "vocab.json"))
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8") as f:
        json.dump({"train": list(c.entity_split.train), "test": list(c.entity_split.test)}, f, indent=1)
        f.write("\n")


def read_corpus(in_dir):
    docs = corpus_mod.load_jsonl(os.path.join(in_dir, "corpus.jsonl"))
    trips = corpus_mod.load_jsonl(os.path.join(in_dir, "triplets.jsonl"))
    vocab = corpus_mod.Vocab.load(os.path.join(in_dir, "vocab.json"))
    with open(os.path.join(in_dir, "split.json"), encoding="utf-8") as f:
        split = json.load(f)
    return corpus_mod.Corpus(docs, trips, vocab, corpus_mod.EntitySplit(split["train"], split["test"]))


def corpus_from_manifest(m):
    if "corpus_dir" in m:
        return read_corpus(m["corpus_dir"])
    return corpus_mod.generate_corpus(corpus_mod.CorpusConfig.from_dict(m.get("corpus", {})))


def qa_pairs(triplets):
    return [(list(t.source), list(t.target)) for t in triplets]


def val_split(triplets, fraction=0.1):
    """Hold out the entities of the last ``fraction`` of triplets for policy validation."""
    keys = sorted({t.entity_key for t in triplets}, key=corpus_mod._key_order)
    n_val = max(1, int(round(fraction * len(keys))))
    val_keys = set(keys[-n_val:])
    train = [t for t in triplets if t.entity_key not in val_keys]
    val = [t for t in triplets if t.entity_key in val_keys]
    return train, val


# -- policies -----------------------------------------------------------------

def train_policy(name, c, m, seed):
    """Train a learned policy on the fine-tune-train triplets; returns its ParamStore."""
    train, _ = corpus_mod.split_triplets(c.triplets, c.entity_split)
    V = len(c.vocab)
    if name.startswith("supervised"):
        cfg = SupConfig(**{**m.get("supervised", {}), "seed": seed})
        tr, va = val_split(train, m.get("val_fraction", 0.1))
        return train_supervised_policy(tr, va, cfg, vocab_size=V)
    opts = dict(m.get("meta", {}))
    arch = {k: opts.pop(k) for k in ("d_emb", "hidden") if k in opts}
    cfg = MetaConfig.from_dict({**opts, "seed": seed})
    theta = init_lm(V, seed=seed, **m.get("lm", {}))
    phi = init_meta_policy(V, seed=seed, **arch)
    phi, _, _ = run_meta_training(train, theta, phi, cfg, RngStream(seed, "policy"))
    return phi


def policy_from_store(name, store, m=None):
    m = m or {}
    opts = dict(m.get("policy_options", {}).get(name, {}))
    if name.startswith("supervised"):
        variant = "Top1" if name.endswith("top1") else "Top5"
        return supervised_policy(store, variant, opts.get("max_span_len", 10))
    return meta_policy(store, **opts)


def build_policy(name, m=None):
    m = m or {}
    if name == "none":
        return None
    return heuristic_policy(name, **m.get("policy_options", {}).get(name, {}))


# -- pipeline ----------------------------------------------------------------

def _stage(tag, out_dir, fn, *args):
    try:
        return fn(*args)
    except Exception as e:  # noqa: BLE001 - tagged and re-raised
        with open(os.path.join(out_dir, "FAILED"), "w", encoding="utf-8") as f:
            f.write(f"stage: {tag}\n{type(e).__name__}: {e}\n\n{traceback.format_exc()}")
        raise StageError(tag, e) from e


def run_policy(name, c, m, out_dir):
    """Stage 1 + Stage 2 + evaluation (+ analysis) for one policy; returns the EvalReport."""
    seed = int(m.get("seed", 0))
    pdir = os.path.join(out_dir, name)
    os.makedirs(pdir, exist_ok=True)
    V = len(c.vocab)
    s1 = StageConfig.from_dict(m.get("stage1", {}))
    s2 = StageConfig.from_dict(m.get("stage2", {}))
    train, test = corpus_mod.split_triplets(c.triplets, c.entity_split)

    if name in LEARNED:
        store = _stage(f"{name}:policy", out_dir, train_policy, name, c, m, seed)
        store.save(os.path.join(pdir, f"{name}-policy-seed{seed}.json"))
        policy = policy_from_store(name, store, m)
    else:
        policy = _stage(f"{name}:policy", out_dir, build_policy, name, m)

    theta0 = init_lm(V, seed=seed, **m.get("lm", {}))
    losses = []
    theta1 = _stage(f"{name}:stage1", out_dir, intermediate_pretrain, theta0, policy, c.documents,
                    s1, RngStream(seed, "stage1"), losses)
    theta1.save(os.path.join(pdir, f"{name}-stage1-seed{seed}.json"))
    if losses:
        with open(os.path.join(pdir, f"{name}-stage1-loss.csv"), "w", encoding="utf-8", newline="") as f:
            f.write("update,loss\n" + "".join(f"{k},{v:.12g}\n" for k, v in enumerate(losses)))

    tuned = {}
    for s in s2.seeds:
        tuned[s] = _stage(f"{name}:stage2:{s}", out_dir, finetune, theta1, qa_pairs(train), s2, s)
        tuned[s].save(os.path.join(pdir, f"{name}-stage2-seed{s}.json"))
    report = _stage(f"{name}:eval", out_dir, evaluate, tuned, qa_pairs(test), c.vocab, "test")
    with open(os.path.join(pdir, f"{name}-report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    updates = 0 if policy is None else s1.total_updates
    notes = "no intermediate pre-training" if policy is None else ""
    row = report.csv_row(name, updates, notes)
    with open(os.path.join(pdir, f"{name}-report.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(CSV_HEADER + "\n" + row + "\n")

    if policy is not None and m.get("analysis", {}).get("enabled", True):
        _stage(f"{name}:analysis", out_dir, run_analysis, policy, c, m, pdir, seed)
    return report, row


def run_analysis(policy, c, m, out_dir, seed):
    fraction = m.get("analysis", {}).get("fraction", 0.01)
    docs = sample_corpus(c.documents, fraction, RngStream(seed, "analysis"))
    sample = mask_sample(policy, docs, RngStream(seed, "analysis:masks"))
    try:
        write_pos_csv(pos_mask_distribution(sample, c.documents),
                      os.path.join(out_dir, f"{policy.name}-pos.csv"))
        write_zipf_csv(zipf_for(sample, c.documents, c.vocab),
                       os.path.join(out_dir, f"{policy.name}-zipf.csv"))
    except EmptySample as e:
        log.warning("analysis skipped: %s", e)


def run_experiment(m, out_dir):
    """Run every policy of the manifest grid; returns ``{policy: EvalReport}``."""
    m = validate_manifest(m)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(m, f, indent=2, sort_keys=True)
        f.write("\n")
    c = _stage("corpus", out_dir, corpus_from_manifest, m)
    if "corpus_dir" not in m:
        write_corpus(c, os.path.join(out_dir, "corpus"))
    reports, rows = {}, []
    for name in policy_grid(m):
        reports[name], row = run_policy(name, c, m, out_dir)
        rows.append(row)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(CSV_HEADER + "\n" + "".join(r + "\n" for r in rows))
    return reports


def load_store(path, kind=None):
    store = ParamStore.load(path)
    if kind is not None and store.kind != kind:
        raise ContractViolation(f"{path}: expected a {kind!r} checkpoint, found {store.kind!r}")
    return store
