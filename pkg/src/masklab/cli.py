"""``masklab`` command line.

Every subcommand takes ``--config`` (JSON), ``--seed`` and ``--out``.
Exit status: 0 success, 1 contract violation or bad usage, 2 I/O error.
"""
import argparse
import json
import logging
import os
import sys

from . import corpus as corpus_mod
from . import experiment as ex
from .analysis import (MaskSample, pos_mask_distribution, write_pos_csv, write_zipf_csv,
                       zipf_for)
from .diffcore import RngStream
from .errors import ContractViolation, CorpusFormatError
from .lmodel import init_lm
from .masking import load_mask_dump, save_mask_dump
from .trainers import (EvalReport, StageConfig, SupConfig, evaluate, exact_match, finetune,
                       intermediate_pretrain, train_supervised_policy)

log = logging.getLogger("masklab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _read_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _policy(args, cfg):
    if args.policy in ex.LEARNED:
        if not args.policy_checkpoint:
            raise ContractViolation(f"policy {args.policy!r} needs --policy-checkpoint")
        kind = "meta-policy" if args.policy == "meta" else "supervised-policy"
        return ex.policy_from_store(args.policy, ex.load_store(args.policy_checkpoint, kind), cfg)
    return ex.build_policy(args.policy, cfg)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    c = corpus_mod.generate_corpus(corpus_mod.CorpusConfig.from_dict(cfg))
    ex.write_corpus(c, args.out)
    print(f"{len(c.documents)} documents, {len(c.triplets)} triplets, vocab {len(c.vocab)} -> {args.out}")


def cmd_pretrain(args):
    cfg = _read_config(args.config)
    c = ex.read_corpus(args.corpus)
    seed = args.seed or 0
    theta = (ex.load_store(args.init, "lm") if args.init
             else init_lm(len(c.vocab), seed=seed, **cfg.get("lm", {})))
    s1 = StageConfig.from_dict(cfg.get("stage1", {}))
    theta = intermediate_pretrain(theta, _policy(args, cfg), c.documents, s1, RngStream(seed, "stage1"))
    path = _out(args, f"lm-stage1-{args.policy}-seed{seed}.json")
    theta.save(path)
    print(path)


def cmd_train_sup_policy(args):
    cfg = _read_config(args.config)
    c = ex.read_corpus(args.corpus)
    seed = args.seed or 0
    sup = SupConfig(**{**cfg.get("supervised", cfg), "seed": seed})
    train, _ = corpus_mod.split_triplets(c.triplets, c.entity_split)
    tr, va = ex.val_split(train, cfg.get("val_fraction", 0.1))
    history = []
    store = train_supervised_policy(tr, va, sup, vocab_size=len(c.vocab), history=history)
    for epoch, tl, vl in history:
        print(f"epoch {epoch} train {tl:.4f} val {vl:.4f}")
    path = _out(args, f"supervised-policy-seed{seed}.json")
    store.save(path)
    print(path)


def cmd_train_meta_policy(args):
    cfg = _read_config(args.config)
    c = ex.read_corpus(args.corpus)
    seed = args.seed or 0
    m = {**cfg, "seed": seed}
    store = ex.train_policy("meta", c, m, seed)
    path = _out(args, f"meta-policy-seed{seed}.json")
    store.save(path)
    print(path)


def cmd_apply_policy(args):
    cfg = _read_config(args.config)
    c = ex.read_corpus(args.corpus)
    seed = args.seed or 0
    policy = _policy(args, cfg)
    if policy is None:
        raise ContractViolation("apply-policy needs a masking policy, not 'none'")
    docs = c.documents[:args.limit] if args.limit else c.documents
    ds = policy.decisions(docs, RngStream(seed, "policy"))
    path = _out(args, f"masks-{policy.name}-seed{seed}.jsonl")
    save_mask_dump([(d.doc_id, policy.name, m) for d, m in zip(docs, ds)], path)
    print(f"{len(docs)} decisions -> {path}")


def cmd_finetune(args):
    cfg = _read_config(args.config)
    c = ex.read_corpus(args.corpus)
    seed = args.seed or 0
    s2 = StageConfig.from_dict(cfg.get("stage2", {}))
    train, _ = corpus_mod.split_triplets(c.triplets, c.entity_split)
    theta = finetune(ex.load_store(args.init, "lm"), ex.qa_pairs(train), s2, seed)
    path = _out(args, f"lm-stage2-seed{seed}.json")
    theta.save(path)
    print(path)


def cmd_eval(args):
    if args.predictions:
        scores = []
        with open(args.predictions, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    scores.append(exact_match(rec["pred"], rec["gold"]))
        if not scores:
            raise ContractViolation("no predictions to score")
        report = EvalReport({args.seed or 0: sum(scores) / len(scores)}, args.split)
    else:
        if not (args.corpus and args.checkpoint):
            raise ContractViolation("eval needs --corpus and --checkpoint (or --predictions)")
        c = ex.read_corpus(args.corpus)
        train, test = corpus_mod.split_triplets(c.triplets, c.entity_split)
        qa = ex.qa_pairs(test if args.split == "test" else train)
        thetas = {k: ex.load_store(p, "lm") for k, p in enumerate(args.checkpoint)}
        report = evaluate(thetas, qa, c.vocab, args.split)
    with open(_out(args, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(f"EM {report.mean}")


def _load_sample(args):
    c = ex.read_corpus(args.corpus)
    recs = load_mask_dump(args.masks)
    if not recs:
        raise ContractViolation("empty mask dump")
    names = {r[1] for r in recs}
    if len(names) != 1:
        raise ContractViolation(f"mask dump mixes policies: {sorted(names)}")
    sample = MaskSample(names.pop(), [(doc_id, d) for doc_id, _, d in recs]).validate(c.documents)
    return c, sample


def cmd_analyze_pos(args):
    c, sample = _load_sample(args)
    path = _out(args, f"{sample.policy_name}-pos.csv")
    write_pos_csv(pos_mask_distribution(sample, c.documents), path)
    print(path)


def cmd_analyze_zipf(args):
    c, sample = _load_sample(args)
    path = _out(args, f"{sample.policy_name}-zipf.csv")
    write_zipf_csv(zipf_for(sample, c.documents, c.vocab), path)
    print(path)


def cmd_run_experiment(args):
    if not args.config:
        raise ContractViolation("run-experiment needs --config <manifest.json>")
    m = ex.load_manifest(args.config)
    if args.seed is not None:
        m["seed"] = args.seed
    ex.run_experiment(m, args.out)
    with open(os.path.join(args.out, "summary.csv"), encoding="utf-8") as f:
        sys.stdout.write(f.read())


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="masklab", description="Masking-policy experiments for closed-book QA.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, corpus=True):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=_u64, help="unsigned 64-bit seed")
        sp.add_argument("--out", default=".", help="output directory (default: .)")
        if corpus:
            sp.add_argument("--corpus", help="directory written by gen-corpus")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus and triplets", corpus=False)
    for name, fn, help_ in (("pretrain", cmd_pretrain, "Stage 1: intermediate pre-training"),
                            ("apply-policy", cmd_apply_policy, "dump a policy's mask decisions as JSONL")):
        sp = add(name, fn, help_)
        sp.add_argument("--policy", required=True,
                        help="none, rand, orig, ssm, mask-first-sent, mask-random-sent, "
                             "supervised-top1, supervised-top5 or meta")
        sp.add_argument("--policy-checkpoint", help="checkpoint of a learned policy")
        if name == "pretrain":
            sp.add_argument("--init", help="LM checkpoint to start from (default: fresh init)")
        else:
            sp.add_argument("--limit", type=int, default=0, help="only the first N documents")
    add("train-sup-policy", cmd_train_sup_policy, "train the supervised span-extractor policy")
    add("train-meta-policy", cmd_train_meta_policy, "meta-learn the masking policy")
    sp = add("finetune", cmd_finetune, "Stage 2: fine-tune on the closed-book QA train split")
    sp.add_argument("--init", required=True, help="LM checkpoint to fine-tune")
    sp = add("eval", cmd_eval, "exact match of fine-tuned checkpoints")
    sp.add_argument("--checkpoint", action="append", help="LM checkpoint (repeat for several seeds)")
    sp.add_argument("--split", default="test", choices=("test", "train"), help="QA split")
    sp.add_argument("--predictions", help="JSONL of {pred, gold} strings to score directly")
    for name, fn in (("analyze-pos", cmd_analyze_pos), ("analyze-zipf", cmd_analyze_zipf)):
        sp = add(name, fn, f"{name[8:]} table for a mask dump")
        sp.add_argument("--masks", required=True, help="JSONL written by apply-policy")
    add("run-experiment", cmd_run_experiment, "run a full manifest (policy grid)", corpus=False)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_corpus = getattr(args, "corpus", "") is None and args.command not in ("eval",)
    try:
        if needs_corpus:
            raise ContractViolation(f"{args.command} needs --corpus")
        args.fn(args)
    except ex.StageError as e:
        print(f"masklab: {e}", file=sys.stderr)
        return 2 if isinstance(e.cause, (OSError, CorpusFormatError)) else 1
    except (OSError, CorpusFormatError, json.JSONDecodeError) as e:
        print(f"masklab: I/O error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"masklab: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
