"""Command-line entry point.

Subcommands: gen-data, split, pretrain, eval-ppl, history-sweep,
finetune-doc, finetune-user, eval-task, ablate, significance. Options come
from an optional TOML config file; explicit flags override file values.
Exit codes: 0 success, 1 user error, 2 internal error.

Every report is JSON carrying the config hash, seed, and package version;
no timestamps or other run-varying fields, so fixed-seed runs are
byte-reproducible. A lock file guards each output directory against
concurrent writers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python 3.10
    import tomli as tomllib

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (
    CorpusFormatError,
    SplitFractions,
    SyntheticConfig,
    UserAttributes,
    Vocabulary,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_users,
    synthetic_vocabulary,
)
from .finetune import (
    DocCapacityError,
    DocFinetuneConfig,
    HeadParams,
    UserFinetuneConfig,
    finetune_document,
    finetune_user,
    load_labeled_docs,
    load_labeled_users,
    make_document_task,
    make_user_task,
    predict_documents,
    predict_users,
    save_labeled_docs,
    save_labeled_users,
)
from .metrics import (
    heldout_eval_instances,
    history_sweep,
    pearson_r,
    permutation_test,
    bootstrap_test,
    perplexity,
    tail_eval_instances,
    weighted_f1,
)
from .model import ModelConfig, TransformerParams
from .recurrence import RecurrenceParams
from .training import TrainConfig, TrainingDiverged, pretrain

USER_ERRORS = (CorpusFormatError, CheckpointError, DocCapacityError,
               ValueError, OSError, KeyError)


class LockError(ValueError):
    pass


class Lock:
    """Exclusive per-output-directory lock file."""

    def __init__(self, outdir: str):
        self.path = os.path.join(outdir, ".lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"output directory is locked by {self.path}; remove it if no "
                "other run is active"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# config plumbing

# every key a config file may define, grouped by section
KNOWN_FIELDS = {
    "paths": {"corpus", "vocab", "attrs", "checkpoint", "output", "docs",
              "users", "train_corpus", "dev_corpus", "history_corpus"},
    "model": {"vocab_size", "d_model", "n_layers", "n_heads", "block_size",
              "insert_layer", "extract_layer", "max_blocks", "dropout"},
    "train": {"lr", "epochs", "batch_users", "seed", "weight_decay",
              "clip_norm", "warmup_steps", "patience", "mode"},
    "synthetic": {"n_users", "messages_min", "messages_max", "tokens_min",
                  "tokens_max", "vocab_size", "subvocab_size", "bias_low",
                  "bias_high", "n_style_groups", "seed", "doc_bias",
                  "docs_per_user"},
    "split": {"dev_unseen", "test_unseen", "seen_users", "heldout_messages",
              "seed"},
    "eval": {"history_blocks", "ks", "mode", "n_target_messages",
             "max_target_blocks"},
    "doc": {"lr", "epochs", "batch_size", "seed", "patience", "mode",
            "max_blocks", "weight_decay", "clip_norm", "head_only"},
    "user": {"lr", "epochs", "batch_size", "seed", "patience", "freeze",
             "train_max_blocks", "eval_max_blocks", "weight_decay",
             "clip_norm"},
    "significance": {"test", "n_resamples", "seed"},
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    for section, body in cfg.items():
        if section not in KNOWN_FIELDS:
            raise ValueError(f"unknown config section [{section}] in {path}")
        if not isinstance(body, dict):
            raise ValueError(f"config section [{section}] must be a table")
        for key in body:
            if key not in KNOWN_FIELDS[section]:
                raise ValueError(
                    f"unknown config field {section}.{key} in {path}"
                )
    return cfg


def cfg_get(cfg: dict, dotted: str, flag_value, default):
    """Effective option value: explicit flag > config file > default."""
    if flag_value is not None:
        return flag_value
    section, key = dotted.split(".", 1)
    value = cfg.get(section, {}).get(key)
    return default if value is None else value


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_report(path: str, payload: dict, config: dict, seed) -> None:
    out = {
        "version": __version__,
        "seed": seed,
        "config_hash": config_hash(config),
        **payload,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, sort_keys=True, indent=2)
        fh.write("\n")


def model_config_from(cfg: dict, vocab_size: int) -> ModelConfig:
    m = cfg.get("model", {})
    mc = ModelConfig(
        vocab_size=int(m.get("vocab_size", vocab_size)),
        d_model=int(m.get("d_model", 32)),
        n_layers=int(m.get("n_layers", 2)),
        n_heads=int(m.get("n_heads", 2)),
        block_size=int(m.get("block_size", 32)),
        insert_layer=int(m.get("insert_layer", 1)),
        extract_layer=int(m.get("extract_layer", 2)),
        max_blocks=int(m.get("max_blocks", 4)),
        dropout=float(m.get("dropout", 0.1)),
    )
    mc.validate()
    return mc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    s = cfg.get("synthetic", {})
    seed = int(cfg_get(cfg, "synthetic.seed", args.seed, 0))
    scfg = SyntheticConfig(
        n_users=int(s.get("n_users", 100)),
        messages_per_user=(int(s.get("messages_min", 15)), int(s.get("messages_max", 25))),
        tokens_per_message=(int(s.get("tokens_min", 8)), int(s.get("tokens_max", 14))),
        vocab_size=int(s.get("vocab_size", 200)),
        subvocab_size=int(s.get("subvocab_size", 20)),
        bias=(float(s.get("bias_low", 0.85)), float(s.get("bias_high", 0.85))),
        n_style_groups=(int(s["n_style_groups"]) if "n_style_groups" in s else None),
        seed=seed,
    )
    outdir = cfg_get(cfg, "paths.output", args.output, None)
    if outdir is None:
        raise ValueError("gen-data needs --output (or paths.output)")
    with Lock(outdir):
        corpus, attrs = generate_synthetic_corpus(scfg)
        vocab = synthetic_vocabulary(scfg.vocab_size)
        save_corpus(corpus, os.path.join(outdir, "corpus.tsv"))
        vocab.save(os.path.join(outdir, "vocab.txt"))
        with open(os.path.join(outdir, "attrs.json"), "w", encoding="utf-8") as fh:
            json.dump(attrs.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        if args.with_doc_task:
            docset = make_document_task(
                corpus, attrs,
                doc_bias=float(s.get("doc_bias", 0.3)),
                docs_per_user=int(s.get("docs_per_user", 3)),
                vocab_size=scfg.vocab_size,
                seed=seed,
            )
            save_labeled_docs(docset, os.path.join(outdir, "docs.tsv"))
        if args.with_user_task:
            userset = make_user_task(attrs, seed=seed)
            save_labeled_users(userset, os.path.join(outdir, "users.tsv"))
        write_report(
            os.path.join(outdir, "gen_report.json"),
            {"n_users": corpus.n_users, "n_messages": corpus.n_messages,
             "vocab_size": len(vocab)},
            {"synthetic": s, "seed": seed}, seed,
        )
    return 0


def cmd_split(args) -> int:
    cfg = load_config(args.config)
    corpus_path = cfg_get(cfg, "paths.corpus", args.corpus, None)
    outdir = cfg_get(cfg, "paths.output", args.output, None)
    if corpus_path is None or outdir is None:
        raise ValueError("split needs --corpus and --output")
    sp = cfg.get("split", {})
    seed = int(cfg_get(cfg, "split.seed", args.seed, 0))
    fractions = SplitFractions(
        dev_unseen=float(sp.get("dev_unseen", 0.1)),
        test_unseen=float(sp.get("test_unseen", 0.1)),
        seen_users=float(sp.get("seen_users", 0.2)),
        heldout_messages=float(sp.get("heldout_messages", 0.2)),
    )
    with Lock(outdir):
        corpus = load_corpus(corpus_path, on_warning=lambda m: print(m, file=sys.stderr))
        splits = split_users(corpus, fractions, seed)
        save_corpus(splits.train, os.path.join(outdir, "train.tsv"))
        save_corpus(splits.dev_unseen, os.path.join(outdir, "dev_unseen.tsv"))
        save_corpus(splits.test_unseen, os.path.join(outdir, "test_unseen.tsv"))
        save_corpus(splits.dev_seen_heldout, os.path.join(outdir, "dev_seen.tsv"))
        write_report(
            os.path.join(outdir, "split_report.json"),
            {"train_users": splits.train.n_users,
             "dev_unseen_users": splits.dev_unseen.n_users,
             "test_unseen_users": splits.test_unseen.n_users,
             "dev_seen_users": splits.dev_seen_heldout.n_users},
            {"split": sp, "seed": seed}, seed,
        )
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    train_path = cfg_get(cfg, "paths.train_corpus", args.train_corpus, None)
    dev_path = cfg_get(cfg, "paths.dev_corpus", args.dev_corpus, None)
    vocab_path = cfg_get(cfg, "paths.vocab", args.vocab, None)
    outdir = cfg_get(cfg, "paths.output", args.output, None)
    if None in (train_path, dev_path, vocab_path, outdir):
        raise ValueError("pretrain needs --train-corpus, --dev-corpus, --vocab, --output")
    t = cfg.get("train", {})
    tcfg = TrainConfig(
        lr=float(cfg_get(cfg, "train.lr", args.lr, 1e-3)),
        epochs=int(cfg_get(cfg, "train.epochs", args.epochs, 10)),
        batch_users=int(t.get("batch_users", 4)),
        seed=int(cfg_get(cfg, "train.seed", args.seed, 0)),
        weight_decay=float(t.get("weight_decay", 0.01)),
        clip_norm=float(t.get("clip_norm", 1.0)),
        warmup_steps=int(t.get("warmup_steps", 0)),
        patience=int(t.get("patience", 3)),
        mode=str(cfg_get(cfg, "train.mode", args.mode, "full")),
    )
    with Lock(outdir):
        vocab = Vocabulary.load(vocab_path)
        mcfg = model_config_from(cfg, len(vocab))
        if mcfg.vocab_size != len(vocab):
            raise ValueError(
                f"model.vocab_size {mcfg.vocab_size} != vocabulary size {len(vocab)}"
            )
        train_corpus = load_corpus(train_path)
        dev_corpus = load_corpus(dev_path)
        result = pretrain(mcfg, tcfg, train_corpus, dev_corpus, vocab)
        ckpt = Checkpoint(
            config=mcfg, params=result.params, rec=result.rec, vocab=vocab,
            meta={"train": tcfg.to_dict(), "best_dev_nll": result.best_dev_nll,
                  "best_epoch": result.best_epoch, "steps": result.steps},
        )
        save_checkpoint(ckpt, os.path.join(outdir, "ckpt.bin"))
        with open(os.path.join(outdir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
            for row in result.history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        write_report(
            os.path.join(outdir, "pretrain_report.json"),
            {"best_dev_nll": result.best_dev_nll, "best_epoch": result.best_epoch,
             "steps": result.steps, "mode": tcfg.mode},
            {"model": mcfg.to_dict(), "train": tcfg.to_dict()}, tcfg.seed,
        )
    return 0


def _check_vocab(ckpt: Checkpoint, vocab_path: str | None) -> None:
    if vocab_path is None:
        return
    vocab = Vocabulary.load(vocab_path)
    if vocab != ckpt.vocab:
        for i, (a, b) in enumerate(zip(vocab.tokens, ckpt.vocab.tokens)):
            if a != b:
                raise ValueError(
                    f"vocabulary mismatch at id {i}: corpus vocab has {a!r}, "
                    f"checkpoint has {b!r}"
                )
        raise ValueError(
            f"vocabulary mismatch: corpus vocab has {len(vocab)} tokens, "
            f"checkpoint has {len(ckpt.vocab)}"
        )


def _eval_instances(args, ckpt: Checkpoint, cfg: dict):
    corpus = load_corpus(args.corpus)
    history_path = cfg_get(cfg, "paths.history_corpus", args.history_corpus, None)
    if history_path is not None:
        return heldout_eval_instances(corpus, load_corpus(history_path))
    n_tail = int(cfg_get(cfg, "eval.n_target_messages", args.n_target_messages, 3))
    instances = tail_eval_instances(corpus, n_tail)
    if not instances:
        raise ValueError("no users with enough messages to form eval instances")
    return instances


def cmd_eval_ppl(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    _check_vocab(ckpt, args.vocab)
    instances = _eval_instances(args, ckpt, cfg)
    k = int(cfg_get(cfg, "eval.history_blocks", args.history_blocks, 0))
    mode = str(cfg_get(cfg, "eval.mode", args.mode, "full"))
    mtb = int(cfg_get(cfg, "eval.max_target_blocks", args.max_target_blocks, 16))
    rep = perplexity(ckpt.config, ckpt.params, ckpt.rec, ckpt.vocab, instances,
                     history_blocks=k, mode=mode, max_target_blocks=mtb)
    payload = rep.to_json_dict()
    seed = ckpt.meta.get("train", {}).get("seed", 0)
    with Lock(args.output):
        write_report(os.path.join(args.output, "eval_ppl.json"), payload,
                     {"eval": {"history_blocks": k, "mode": mode}}, seed)
    print(f"perplexity={rep.value:.6f} tokens={rep.details['tokens']} k={k}")
    return 0


def cmd_history_sweep(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    _check_vocab(ckpt, args.vocab)
    instances = _eval_instances(args, ckpt, cfg)
    ks_raw = cfg_get(cfg, "eval.ks", args.ks, "0,1,2,4")
    ks = [int(x) for x in str(ks_raw).split(",")]
    mode = str(cfg_get(cfg, "eval.mode", args.mode, "full"))
    rep = history_sweep(ckpt.config, ckpt.params, ckpt.rec, ckpt.vocab,
                        instances, ks, mode=mode)
    seed = ckpt.meta.get("train", {}).get("seed", 0)
    with Lock(args.output):
        write_report(os.path.join(args.output, "history_sweep.json"),
                     rep.to_json_dict(), {"eval": {"ks": ks, "mode": mode}}, seed)
    for k in ks:
        print(f"k={k} perplexity={rep.details['table'][str(k)]:.6f}")
    return 0


def _head_to_arrays(head: HeadParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in head.named()}


def head_from_checkpoint(ckpt: Checkpoint) -> HeadParams:
    arrays = ckpt.opt_arrays
    needed = ("head.ln_g", "head.ln_b", "head.w", "head.b")
    if any(k not in arrays for k in needed):
        raise ValueError("checkpoint has no fine-tuned head")
    from .autodiff import Tensor

    return HeadParams(
        ln_g=Tensor(arrays["head.ln_g"], requires_grad=True),
        ln_b=Tensor(arrays["head.ln_b"], requires_grad=True),
        w=Tensor(arrays["head.w"], requires_grad=True),
        b=Tensor(arrays["head.b"], requires_grad=True),
    )


def cmd_finetune_doc(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    docs = load_labeled_docs(cfg_get(cfg, "paths.docs", args.docs, None))
    corpus_path = cfg_get(cfg, "paths.corpus", args.corpus, None)
    corpus = load_corpus(corpus_path) if corpus_path else None
    d = cfg.get("doc", {})
    dcfg = DocFinetuneConfig(
        lr=float(cfg_get(cfg, "doc.lr", args.lr, 1e-3)),
        epochs=int(cfg_get(cfg, "doc.epochs", args.epochs, 10)),
        batch_size=int(d.get("batch_size", 8)),
        seed=int(cfg_get(cfg, "doc.seed", args.seed, 0)),
        patience=int(d.get("patience", 2)),
        mode=str(cfg_get(cfg, "doc.mode", args.mode, "full")),
        max_blocks=(int(d["max_blocks"]) if "max_blocks" in d else None),
        weight_decay=float(d.get("weight_decay", 0.0)),
        clip_norm=float(d.get("clip_norm", 1.0)),
        head_only=bool(d.get("head_only", False)),
    )
    with Lock(args.output):
        result = finetune_document(ckpt, docs, corpus, dcfg)
        ckpt.opt_arrays = _head_to_arrays(result.head)
        ckpt.meta = {**ckpt.meta, "doc_finetune": dcfg.to_dict(),
                     "class_names": docs.class_names,
                     "best_dev_loss": result.best_dev_loss}
        save_checkpoint(ckpt, os.path.join(args.output, "ckpt_doc.bin"))
        write_report(
            os.path.join(args.output, "finetune_doc_report.json"),
            {"best_dev_loss": result.best_dev_loss, "mode": dcfg.mode,
             "history": result.history},
            {"doc": dcfg.to_dict()}, dcfg.seed,
        )
    return 0


def cmd_finetune_user(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    users = load_labeled_users(cfg_get(cfg, "paths.users", args.users, None))
    corpus = load_corpus(cfg_get(cfg, "paths.corpus", args.corpus, None))
    u = cfg.get("user", {})
    ucfg = UserFinetuneConfig(
        lr=float(cfg_get(cfg, "user.lr", args.lr, 1e-2)),
        epochs=int(cfg_get(cfg, "user.epochs", args.epochs, 20)),
        batch_size=int(u.get("batch_size", 8)),
        seed=int(cfg_get(cfg, "user.seed", args.seed, 0)),
        patience=int(u.get("patience", 3)),
        freeze=str(cfg_get(cfg, "user.freeze", args.freeze, "recurrence_only")),
        train_max_blocks=int(u.get("train_max_blocks", 4)),
        eval_max_blocks=int(u.get("eval_max_blocks", 16)),
        weight_decay=float(u.get("weight_decay", 0.0)),
        clip_norm=float(u.get("clip_norm", 1.0)),
    )
    with Lock(args.output):
        result = finetune_user(ckpt, users, corpus, ucfg)
        ckpt.opt_arrays = _head_to_arrays(result.head)
        ckpt.meta = {**ckpt.meta, "user_finetune": ucfg.to_dict(),
                     "best_dev_mse": result.best_dev_mse}
        save_checkpoint(ckpt, os.path.join(args.output, "ckpt_user.bin"))
        write_report(
            os.path.join(args.output, "finetune_user_report.json"),
            {"best_dev_mse": result.best_dev_mse, "freeze": ucfg.freeze,
             "history": result.history},
            {"user": ucfg.to_dict()}, ucfg.seed,
        )
    return 0


def cmd_eval_task(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    head = head_from_checkpoint(ckpt)
    split = args.split
    if args.task == "doc":
        docs = load_labeled_docs(cfg_get(cfg, "paths.docs", args.docs, None))
        corpus_path = cfg_get(cfg, "paths.corpus", args.corpus, None)
        corpus = load_corpus(corpus_path) if corpus_path else None
        mode = ckpt.meta.get("doc_finetune", {}).get("mode", "full")
        mb = ckpt.meta.get("doc_finetune", {}).get("max_blocks")
        records = docs.by_split(split)
        if docs.class_names != ckpt.meta.get("class_names", docs.class_names):
            raise ValueError(
                "class names in the labeled file differ from the fine-tuned head's"
            )
        preds = predict_documents(ckpt, head, docs, records, corpus, mode=mode,
                                  max_blocks=mb)
        truth = [r.label for r in records]
        f1 = weighted_f1(truth, preds)
        per_instance = {f"{r.user_id}:{r.timestamp}": float(p == r.label)
                        for r, p in zip(records, preds)}
        payload = {"metric": "weighted_f1", "value": f1, "split": split,
                   "n": len(records), "per_instance": per_instance}
        line = f"weighted_f1={f1:.6f} n={len(records)} split={split}"
    else:
        users = load_labeled_users(cfg_get(cfg, "paths.users", args.users, None))
        corpus = load_corpus(cfg_get(cfg, "paths.corpus", args.corpus, None))
        emb = ckpt.meta.get("user_finetune", {}).get("eval_max_blocks", 16)
        records = users.by_split(split)
        preds = predict_users(ckpt, head, records, corpus, max_blocks=emb)
        r = pearson_r([preds[x.user_id] for x in records],
                      [x.target for x in records])
        payload = {"metric": "pearson_r", "value": r, "split": split,
                   "n": len(records),
                   "per_instance": {x.user_id: preds[x.user_id] for x in records}}
        line = f"pearson_r={r:.6f} n={len(records)} split={split}"
    seed = ckpt.meta.get("train", {}).get("seed", 0)
    with Lock(args.output):
        write_report(os.path.join(args.output, f"eval_task_{args.task}.json"),
                     payload, {"task": args.task, "split": split}, seed)
    print(line)
    return 0


def cmd_ablate(args) -> int:
    """Fine-tune the document task under one ablation variant and report F1."""
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    variant = args.variant
    if variant == "not_pretrained":
        seed = int(cfg_get(cfg, "doc.seed", args.seed, 0))
        rng = np.random.default_rng(seed)
        params = TransformerParams.init(ckpt.config, rng)
        rec = RecurrenceParams.init(ckpt.config, params, rng)
        ckpt = Checkpoint(config=ckpt.config, params=params, rec=rec,
                          vocab=ckpt.vocab, meta={"variant": "not_pretrained"})
        mode = "full"
    else:
        mode = variant  # no_recurrence | no_history | frozen
    docs = load_labeled_docs(cfg_get(cfg, "paths.docs", args.docs, None))
    corpus_path = cfg_get(cfg, "paths.corpus", args.corpus, None)
    corpus = load_corpus(corpus_path) if corpus_path else None
    d = cfg.get("doc", {})
    dcfg = DocFinetuneConfig(
        lr=float(cfg_get(cfg, "doc.lr", args.lr, 1e-3)),
        epochs=int(cfg_get(cfg, "doc.epochs", args.epochs, 10)),
        batch_size=int(d.get("batch_size", 8)),
        seed=int(cfg_get(cfg, "doc.seed", args.seed, 0)),
        patience=int(d.get("patience", 2)),
        mode=mode,
        max_blocks=(int(d["max_blocks"]) if "max_blocks" in d else None),
    )
    with Lock(args.output):
        result = finetune_document(ckpt, docs, corpus, dcfg)
        records = docs.by_split("test")
        preds = predict_documents(ckpt, result.head, docs, records, corpus,
                                  mode=mode, max_blocks=dcfg.max_blocks)
        truth = [r.label for r in records]
        f1 = weighted_f1(truth, preds)
        per_instance = {f"{r.user_id}:{r.timestamp}": float(p == r.label)
                        for r, p in zip(records, preds)}
        write_report(
            os.path.join(args.output, f"ablate_{variant}.json"),
            {"metric": "weighted_f1", "value": f1, "variant": variant,
             "n": len(records), "per_instance": per_instance},
            {"doc": dcfg.to_dict(), "variant": variant}, dcfg.seed,
        )
    print(f"variant={variant} weighted_f1={f1:.6f} n={len(records)}")
    return 0


def _load_per_instance(spec: str) -> dict[str, float]:
    """Read `path[:dotted.key]` and return that {id: value} mapping
    (default key: per_instance)."""
    path, _, dotted = spec.partition(":")
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    for part in (dotted or "per_instance").split("."):
        if not isinstance(obj, dict) or part not in obj:
            raise ValueError(f"{path}: no field {dotted or 'per_instance'!r}")
        obj = obj[part]
    if not isinstance(obj, dict) or not obj:
        raise ValueError(f"{path}: field does not hold per-instance values")
    return {k: float(v) for k, v in obj.items()}


def cmd_significance(args) -> int:
    cfg = load_config(args.config)
    a = _load_per_instance(args.a)
    b = _load_per_instance(args.b)
    keys = sorted(set(a) & set(b))
    if not keys:
        raise ValueError("the two reports share no instance ids")
    xa = [a[k] for k in keys]
    xb = [b[k] for k in keys]
    test = str(cfg_get(cfg, "significance.test", args.test, "permutation"))
    n_res = int(cfg_get(cfg, "significance.n_resamples", args.n_resamples, 9999))
    seed = int(cfg_get(cfg, "significance.seed", args.seed, 0))
    if test == "permutation":
        res = permutation_test(xa, xb, n_resamples=n_res, seed=seed)
    elif test == "bootstrap":
        res = bootstrap_test(xa, xb, n_resamples=n_res, seed=seed)
    else:
        raise ValueError(f"unknown test {test!r} (permutation|bootstrap)")
    payload = {"test": test, "n_pairs": len(keys), **res.to_json_dict()}
    if args.output:
        with Lock(args.output):
            write_report(os.path.join(args.output, "significance.json"),
                         payload, {"significance": {"test": test,
                                                    "n_resamples": n_res}}, seed)
    print(f"test={test} observed={res.observed:.6f} p={res.p_value:.6f} "
          f"n_pairs={len(keys)}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="userlm",
        description="User-conditioned language modeling: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file; flags override it")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--output")
    p.add_argument("--seed", type=int)
    p.add_argument("--with-doc-task", action="store_true")
    p.add_argument("--with-user-task", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="split a corpus into train/dev/test")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--output")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="train on user block streams")
    common(p)
    p.add_argument("--train-corpus")
    p.add_argument("--dev-corpus")
    p.add_argument("--vocab")
    p.add_argument("--output")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("full", "no_history", "frozen_state",
                                      "no_recurrence"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval-ppl", help="windowed perplexity of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="verify the checkpoint was trained with this vocabulary")
    p.add_argument("--history-corpus", help="score --corpus messages with this history")
    p.add_argument("--output", required=True)
    p.add_argument("--history-blocks", type=int)
    p.add_argument("--n-target-messages", type=int)
    p.add_argument("--max-target-blocks", type=int)
    p.add_argument("--mode", choices=("full", "no_history", "frozen_state",
                                      "no_recurrence"))
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("history-sweep", help="perplexity vs history blocks")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--history-corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--ks", help="comma-separated history sizes, e.g. 0,1,2,4")
    p.add_argument("--n-target-messages", type=int)
    p.add_argument("--max-target-blocks", type=int)
    p.add_argument("--mode", choices=("full", "no_history", "frozen_state",
                                      "no_recurrence"))
    p.set_defaults(func=cmd_history_sweep)

    p = sub.add_parser("finetune-doc", help="document classification fine-tune")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs")
    p.add_argument("--corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("full", "no_recurrence", "no_history",
                                      "frozen"))
    p.set_defaults(func=cmd_finetune_doc)

    p = sub.add_parser("finetune-user", help="user regression fine-tune")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users")
    p.add_argument("--corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze", choices=("recurrence_only", "all", "none"))
    p.set_defaults(func=cmd_finetune_user)

    p = sub.add_parser("eval-task", help="score a fine-tuned checkpoint")
    common(p)
    p.add_argument("--task", choices=("doc", "user"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs")
    p.add_argument("--users")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_eval_task)

    p = sub.add_parser("ablate", help="document task under an ablation variant")
    common(p)
    p.add_argument("--variant", required=True,
                   choices=("no_recurrence", "not_pretrained", "no_history",
                            "frozen"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs")
    p.add_argument("--corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("significance", help="paired test between two reports")
    common(p)
    p.add_argument("--a", required=True,
                   help="report path, optionally path:dotted.field")
    p.add_argument("--b", required=True)
    p.add_argument("--test", choices=("permutation", "bootstrap"))
    p.add_argument("--n-resamples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_significance)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses exit code 2 for usage problems; those are user errors
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except LockError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"internal error: training diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
