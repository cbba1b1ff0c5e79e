"""Adapting a pre-trained checkpoint to labeled tasks.

Document classification: the labeled message starts a fresh block placed
after up to `max_blocks - (labeled blocks)` of the author's most recent
history blocks; the document representation is the hidden state at the
message's last non-PAD token. User regression: the representation is the
mean of the per-block user states, layer-normed and linearly mapped.

Labeled document files are line-delimited
    user_id<TAB>timestamp<TAB>split{train|dev|test}<TAB>label<TAB>text
with history supplied by the corpus keyed on user_id. User-target files are
    user_id<TAB>split<TAB>target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    clip_grad_norm,
    layer_norm,
    matmul,
    mul,
    nll_rows,
    reshape,
    take,
    tsum,
)
from .checkpoint import Checkpoint
from .corpus import (
    BlockSequence,
    CorpusFormatError,
    Message,
    UserAttributes,
    UserCorpus,
    Vocabulary,
    _escape,
    _unescape,
    segment_into_blocks,
    synthetic_word,
)
from .model import ModelConfig, _normal
from .recurrence import forward_blocks, mean_state
from .training import AdamW, _restore, _snapshot

SPLITS = ("train", "dev", "test")

DOC_MODES = ("full", "no_recurrence", "no_history", "frozen")
FREEZE_POLICIES = ("recurrence_only", "all", "none")


class DocCapacityError(ValueError):
    """Labeled message cannot fit within the block budget at all."""


# ---------------------------------------------------------------------------
# labeled data containers


@dataclass
class LabeledDoc:
    user_id: str
    timestamp: int
    split: str
    label: str
    text: str


@dataclass
class LabeledDocumentSet:
    records: list[LabeledDoc]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"bad split {r.split!r} for user {r.user_id!r}")
        if not self.class_names:
            self.class_names = sorted({r.label for r in self.records})
        self._index = {c: i for i, c in enumerate(self.class_names)}

    def by_split(self, split: str) -> list[LabeledDoc]:
        return [r for r in self.records if r.split == split]

    def label_id(self, label: str) -> int:
        return self._index[label]


def load_labeled_docs(path) -> LabeledDocumentSet:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 4)
            if len(parts) != 5:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected user_id<TAB>timestamp<TAB>split"
                    "<TAB>label<TAB>text"
                )
            uid, ts_raw, split, label, text = parts
            try:
                ts = int(ts_raw)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}: timestamp {ts_raw!r} is not an integer"
                ) from None
            if split not in SPLITS:
                raise CorpusFormatError(
                    f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}"
                )
            records.append(LabeledDoc(uid, ts, split, label, _unescape(text)))
    return LabeledDocumentSet(records)


def save_labeled_docs(docs: LabeledDocumentSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in docs.records:
            fh.write(f"{r.user_id}\t{r.timestamp}\t{r.split}\t{r.label}\t{_escape(r.text)}\n")


@dataclass
class LabeledUser:
    user_id: str
    split: str
    target: float


@dataclass
class LabeledUserSet:
    records: list[LabeledUser]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"bad split {r.split!r} for user {r.user_id!r}")
            if r.user_id in seen:
                raise ValueError(f"duplicate target for user {r.user_id!r}")
            seen.add(r.user_id)

    def by_split(self, split: str) -> list[LabeledUser]:
        return [r for r in self.records if r.split == split]


def load_labeled_users(path) -> LabeledUserSet:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected user_id<TAB>split<TAB>target"
                )
            uid, split, raw = parts
            try:
                target = float(raw)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}: target {raw!r} is not a number"
                ) from None
            records.append(LabeledUser(uid, split, target))
    return LabeledUserSet(records)


def save_labeled_users(users: LabeledUserSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in users.records:
            fh.write(f"{r.user_id}\t{r.split}\t{r.target!r}\n")


# ---------------------------------------------------------------------------
# heads


@dataclass
class HeadParams:
    """Layer norm over the pooled representation, then a linear map."""

    ln_g: Tensor
    ln_b: Tensor
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d: int, n_out: int, rng: np.random.Generator) -> "HeadParams":
        return cls(
            ln_g=Tensor(np.ones(d), requires_grad=True),
            ln_b=Tensor(np.zeros(d), requires_grad=True),
            w=Tensor(_normal(rng, (d, n_out)), requires_grad=True),
            b=Tensor(np.zeros(n_out), requires_grad=True),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        return [("head.ln_g", self.ln_g), ("head.ln_b", self.ln_b),
                ("head.w", self.w), ("head.b", self.b)]

    def apply(self, rep_row: Tensor) -> Tensor:
        """[1, d] -> [1, n_out]."""
        return add(matmul(layer_norm(rep_row, self.ln_g, self.ln_b), self.w), self.b)


# ---------------------------------------------------------------------------
# document task


@dataclass
class DocInstance:
    seq: BlockSequence
    rep_block: int  # block holding the labeled message's last token
    rep_pos: int    # position of that token within the block
    label_id: int


def _unpadded_blocks(messages: list[Message], vocab: Vocabulary, block_size: int):
    total = sum(len(vocab.encode(m.text)) for m in messages) + max(0, len(messages) - 1)
    mb = max(1, -(-total // block_size))
    return segment_into_blocks(messages, vocab, block_size, mb, pad_to_max=False).blocks


def build_doc_instance(
    record: LabeledDoc,
    docs: LabeledDocumentSet,
    corpus: UserCorpus | None,
    vocab: Vocabulary,
    cfg: ModelConfig,
    mode: str = "full",
    max_blocks: int | None = None,
) -> DocInstance:
    """Lay out one labeled document as blocks.

    The labeled message starts a fresh block; in history-bearing modes the
    most recent history blocks that fit the budget are prepended. The
    message itself must fit, or this raises DocCapacityError.
    """
    if mode not in DOC_MODES:
        raise ValueError(f"mode must be one of {DOC_MODES}, got {mode!r}")
    mb = max_blocks if max_blocks is not None else cfg.max_blocks
    labeled = _unpadded_blocks([Message(record.timestamp, record.text)], vocab,
                               cfg.block_size)
    if len(labeled) > mb:
        raise DocCapacityError(
            f"labeled message for user {record.user_id!r} needs {len(labeled)} "
            f"blocks; budget is {mb}"
        )
    hist: list = []
    if mode in ("full", "no_recurrence"):
        if corpus is None or record.user_id not in corpus.users:
            raise ValueError(f"no history in corpus for user {record.user_id!r}")
        history = [m for m in corpus.users[record.user_id]
                   if m.timestamp < record.timestamp]
        budget = mb - len(labeled)
        if history and budget > 0:
            hist = _unpadded_blocks(history, vocab, cfg.block_size)[-budget:]
    blocks = hist + labeled
    last = blocks[-1]
    return DocInstance(
        seq=BlockSequence(user_id=record.user_id, blocks=blocks,
                          num_nonpad_blocks=len(blocks)),
        rep_block=len(blocks) - 1,
        rep_pos=last.n_tokens - 1,
        label_id=docs.label_id(record.label),
    )


def _forward_mode(mode: str) -> str:
    return {"full": "full", "no_recurrence": "no_recurrence",
            "no_history": "no_history", "frozen": "no_history"}[mode]


def doc_representation(ckpt: Checkpoint, inst: DocInstance, mode: str,
                       train_rng=None) -> Tensor:
    """[1, d] hidden state at the labeled message's last non-PAD token.

    Normal modes read the final layer; frozen mode reads the extract layer
    (the model then acts as a fixed feature extractor).
    """
    layer = ckpt.config.extract_layer if mode == "frozen" else ckpt.config.n_layers
    out = forward_blocks(ckpt.config, ckpt.params, ckpt.rec, inst.seq,
                         mode=_forward_mode(mode), train_rng=train_rng)
    return take(out.hiddens[inst.rep_block][layer], [inst.rep_pos], axis=0)


@dataclass
class DocFinetuneConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    patience: int = 2
    mode: str = "full"
    max_blocks: int | None = None
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    head_only: bool = False  # forced on in frozen mode

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
            "seed": self.seed, "patience": self.patience, "mode": self.mode,
            "max_blocks": self.max_blocks, "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm, "head_only": self.head_only,
        }


@dataclass
class DocFinetuneResult:
    head: HeadParams
    history: list[dict]
    best_dev_loss: float
    mode: str


def finetune_document(ckpt: Checkpoint, docs: LabeledDocumentSet,
                      corpus: UserCorpus | None,
                      cfg: DocFinetuneConfig) -> DocFinetuneResult:
    """Cross-entropy at the labeled message's last token; early stop on dev
    loss; best-epoch parameters restored before returning."""
    seed_seq = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng, drop_rng = (np.random.default_rng(s)
                                       for s in seed_seq.spawn(3))
    head = HeadParams.init(ckpt.config.d_model, len(docs.class_names), init_rng)
    head_only = cfg.head_only or cfg.mode == "frozen"
    trainable = head.named() + ([] if head_only else ckpt.named())
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def build(records):
        return [build_doc_instance(r, docs, corpus, ckpt.vocab, ckpt.config,
                                   mode=cfg.mode, max_blocks=cfg.max_blocks)
                for r in records]

    train_inst = build(docs.by_split("train"))
    dev_inst = build(docs.by_split("dev"))
    if not train_inst:
        raise ValueError("no training documents")

    def dev_loss() -> float:
        total = 0.0
        for inst in dev_inst:
            rep = doc_representation(ckpt, inst, cfg.mode)
            loss = tsum(nll_rows(head.apply(rep), [inst.label_id]))
            total += float(loss.data)
        return total / max(len(dev_inst), 1)

    result = DocFinetuneResult(head=head, history=[], best_dev_loss=math.inf,
                               mode=cfg.mode)
    best = _snapshot(trainable)
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_inst))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for i in idx:
                inst = train_inst[i]
                with Tape() as tape:
                    rep = doc_representation(
                        ckpt, inst, cfg.mode,
                        train_rng=None if cfg.mode == "frozen" else drop_rng)
                    loss = tsum(nll_rows(head.apply(rep), [inst.label_id]))
                    tape.backward(loss, seed=1.0 / len(idx))
                epoch_loss += float(loss.data)
            clip_grad_norm([p for _, p in trainable], cfg.clip_norm)
            opt.step()
            step += 1
        dl = dev_loss() if dev_inst else epoch_loss / len(train_inst)
        result.history.append({"step": step, "epoch": epoch,
                               "train_loss": epoch_loss / len(train_inst),
                               "dev_loss": dl})
        if dl < result.best_dev_loss:
            result.best_dev_loss = dl
            best = _snapshot(trainable)
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    _restore(trainable, best)
    return result


def predict_documents(ckpt: Checkpoint, head: HeadParams,
                      docs: LabeledDocumentSet, records: list[LabeledDoc],
                      corpus: UserCorpus | None, mode: str = "full",
                      max_blocks: int | None = None) -> list[str]:
    """Argmax class name per record."""
    out = []
    for r in records:
        inst = build_doc_instance(r, docs, corpus, ckpt.vocab, ckpt.config,
                                  mode=mode, max_blocks=max_blocks)
        rep = doc_representation(ckpt, inst, mode)
        logits = head.apply(rep).data[0]
        out.append(docs.class_names[int(np.argmax(logits))])
    return out


# ---------------------------------------------------------------------------
# user task


@dataclass
class UserFinetuneConfig:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    patience: int = 3
    freeze: str = "recurrence_only"
    train_max_blocks: int = 4
    eval_max_blocks: int = 16
    weight_decay: float = 0.0
    clip_norm: float = 1.0

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
            "seed": self.seed, "patience": self.patience, "freeze": self.freeze,
            "train_max_blocks": self.train_max_blocks,
            "eval_max_blocks": self.eval_max_blocks,
            "weight_decay": self.weight_decay, "clip_norm": self.clip_norm,
        }


@dataclass
class UserFinetuneResult:
    head: HeadParams
    history: list[dict]
    best_dev_mse: float


def _user_seq(corpus: UserCorpus, uid: str, vocab: Vocabulary,
              cfg: ModelConfig, max_blocks: int) -> BlockSequence:
    if uid not in corpus.users:
        raise ValueError(f"user {uid!r} not in corpus")
    return segment_into_blocks(corpus.users[uid], vocab, cfg.block_size,
                               max_blocks, pad_to_max=False, user_id=uid)


def reshape_row(vec: Tensor) -> Tensor:
    """[d] -> [1, d] for head application."""
    return reshape(vec, (1, vec.shape[-1]))


def user_representation(ckpt: Checkpoint, seq: BlockSequence,
                        train_rng=None) -> Tensor:
    """[1, d] mean of the user-state vectors over non-PAD blocks."""
    out = forward_blocks(ckpt.config, ckpt.params, ckpt.rec, seq, mode="full",
                         train_rng=train_rng)
    return reshape_row(mean_state(out))


def _trainable_for_freeze(ckpt: Checkpoint, head: HeadParams, freeze: str):
    if freeze == "all":
        return head.named()
    if freeze == "recurrence_only":
        rec = ckpt.rec
        return head.named() + [
            ("rec.w_state", rec.w_state),
            ("rec.w_pooled", rec.w_pooled),
            ("rec.wq_joint", rec.wq_joint),
            ("rec.bq_joint", rec.bq_joint),
        ]
    if freeze == "none":
        return head.named() + ckpt.named()
    raise ValueError(f"freeze must be one of {FREEZE_POLICIES}, got {freeze!r}")


def finetune_user(ckpt: Checkpoint, users: LabeledUserSet, corpus: UserCorpus,
                  cfg: UserFinetuneConfig) -> UserFinetuneResult:
    """Squared-error regression on the mean user state.

    Training streams are capped at train_max_blocks; dev/test evaluation at
    eval_max_blocks. The freeze policy decides which model tensors move;
    everything else stays bit-identical.
    """
    seed_seq = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng, drop_rng = (np.random.default_rng(s)
                                       for s in seed_seq.spawn(3))
    head = HeadParams.init(ckpt.config.d_model, 1, init_rng)
    trainable = _trainable_for_freeze(ckpt, head, cfg.freeze)
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def seqs_for(records, cap):
        return [(r, _user_seq(corpus, r.user_id, ckpt.vocab, ckpt.config, cap))
                for r in records]

    train_rs = seqs_for(users.by_split("train"), cfg.train_max_blocks)
    dev_rs = seqs_for(users.by_split("dev"), cfg.eval_max_blocks)
    if not train_rs:
        raise ValueError("no training users")

    def mse(pairs) -> float:
        total = 0.0
        for r, seq in pairs:
            out = forward_blocks(ckpt.config, ckpt.params, ckpt.rec, seq, mode="full")
            pred = float(head.apply(reshape_row(mean_state(out))).data[0, 0])
            total += (pred - r.target) ** 2
        return total / len(pairs)

    result = UserFinetuneResult(head=head, history=[], best_dev_mse=math.inf)
    best = _snapshot(trainable)
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_rs))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for i in idx:
                r, seq = train_rs[i]
                with Tape() as tape:
                    out = forward_blocks(ckpt.config, ckpt.params, ckpt.rec, seq,
                                         mode="full", train_rng=drop_rng)
                    pred = head.apply(reshape_row(mean_state(out)))
                    diff = add(pred, -float(r.target))
                    loss = tsum(mul(diff, diff))
                    tape.backward(loss, seed=1.0 / len(idx))
                epoch_loss += float(loss.data)
            clip_grad_norm([p for _, p in trainable], cfg.clip_norm)
            opt.step()
            step += 1
        dm = mse(dev_rs) if dev_rs else epoch_loss / len(train_rs)
        result.history.append({"step": step, "epoch": epoch,
                               "train_mse": epoch_loss / len(train_rs),
                               "dev_mse": dm})
        if dm < result.best_dev_mse:
            result.best_dev_mse = dm
            best = _snapshot(trainable)
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    _restore(trainable, best)
    return result


def predict_users(ckpt: Checkpoint, head: HeadParams, records: list[LabeledUser],
                  corpus: UserCorpus, max_blocks: int = 16) -> dict[str, float]:
    preds = {}
    for r in records:
        seq = _user_seq(corpus, r.user_id, ckpt.vocab, ckpt.config, max_blocks)
        out = forward_blocks(ckpt.config, ckpt.params, ckpt.rec, seq, mode="full")
        preds[r.user_id] = float(head.apply(reshape_row(mean_state(out))).data[0, 0])
    return preds


def baseline_user_predict(predictions: list[float]) -> float:
    """Collapse per-message predictions to one per-user value: the mean."""
    if not predictions:
        raise ValueError("no predictions to average")
    return float(np.mean(np.asarray(predictions, dtype=np.float64)))


# ---------------------------------------------------------------------------
# synthetic labeled tasks from generator state


def _assign_splits(uids: list[str], fractions: tuple[float, float, float],
                   rng: np.random.Generator) -> dict[str, str]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = list(rng.permutation(len(uids)))
    n_train = int(round(len(uids) * fractions[0]))
    n_dev = int(round(len(uids) * fractions[1]))
    out = {}
    for rank, i in enumerate(order):
        if rank < n_train:
            out[uids[i]] = "train"
        elif rank < n_train + n_dev:
            out[uids[i]] = "dev"
        else:
            out[uids[i]] = "test"
    return out


def make_document_task(
    corpus: UserCorpus,
    attrs: UserAttributes,
    doc_bias: float = 0.3,
    docs_per_user: int = 3,
    tokens_per_doc: tuple[int, int] = (8, 14),
    vocab_size: int = 200,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> LabeledDocumentSet:
    """Label = the author's style group; the labeled message itself is drawn
    with a deliberately weak bias so history carries most of the signal.

    Timestamps land after every existing message of the user, satisfying the
    history-precedes-label invariant. Splits are assigned per user so no
    author appears in two splits.
    """
    rng = np.random.default_rng(seed)
    uids = [u for u in corpus.user_ids() if attrs.group.get(u, -1) >= 0]
    if not uids:
        raise ValueError("corpus has no style groups; generate with n_style_groups")
    split_of = _assign_splits(uids, fractions, rng)
    records = []
    for uid in uids:
        sub = np.asarray(attrs.subvocab[uid])
        label = f"g{attrs.group[uid]}"
        last_ts = max(m.timestamp for m in corpus.users[uid])
        for j in range(docs_per_user):
            n_tok = int(rng.integers(tokens_per_doc[0], tokens_per_doc[1] + 1))
            from_sub = rng.random(n_tok) < doc_bias
            picks = np.where(
                from_sub,
                sub[rng.integers(0, sub.size, size=n_tok)],
                rng.integers(0, vocab_size, size=n_tok),
            )
            text = " ".join(synthetic_word(int(w)) for w in picks)
            records.append(LabeledDoc(uid, last_ts + 1 + j, split_of[uid], label, text))
    return LabeledDocumentSet(records)


def make_user_task(
    attrs: UserAttributes,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> LabeledUserSet:
    """Target = each user's generator bias (one real value per user)."""
    rng = np.random.default_rng(seed)
    uids = sorted(attrs.bias)
    split_of = _assign_splits(uids, fractions, rng)
    return LabeledUserSet(
        [LabeledUser(uid, split_of[uid], attrs.bias[uid]) for uid in uids]
    )
