"""Next-token objective over block streams, AdamW, and the training loop.

Loss convention: targets are within-block only (position p predicts p+1 of
the same block), so the last non-PAD position of each block is never
scored and PAD is never a target. Separator tokens are ordinary targets.
A block with n non-PAD tokens therefore contributes n-1 scored tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, Tape, add, clip_grad_norm, mul, nll_rows, take, tsum
from .corpus import Block, BlockSequence, UserCorpus, Vocabulary, segment_into_blocks
from .model import ModelConfig, TransformerParams
from .recurrence import RecurrenceParams, forward_blocks


class TrainingDiverged(RuntimeError):
    pass


def block_target_count(block: Block) -> int:
    mask = block.attention_mask
    return int(np.sum(mask[:-1] & mask[1:]))


def sequence_target_count(seq: BlockSequence) -> int:
    return sum(block_target_count(b) for b in seq.blocks if not b.is_pad_block)


def block_nll_sum(logits: Tensor, block: Block) -> tuple[Tensor | None, int]:
    """Summed NLL of the scored positions of one block. None when a block
    holds a single token (nothing to predict)."""
    mask = block.attention_mask
    valid = mask[:-1] & mask[1:]
    positions = np.nonzero(valid)[0]
    if positions.size == 0:
        return None, 0
    rows = take(logits, positions, axis=0)
    targets = block.token_ids[positions + 1]
    return tsum(nll_rows(rows, targets)), int(positions.size)


def stream_nll(logits_blocks: list[Tensor], seq: BlockSequence) -> tuple[Tensor, int]:
    """Summed NLL over every scored position of a block sequence.

    `logits_blocks` must align with the non-PAD blocks of `seq` in order.
    Returns (total, count); mean NLL is total/count.
    """
    nonpad = [b for b in seq.blocks if not b.is_pad_block]
    if len(logits_blocks) != len(nonpad):
        raise ValueError(
            f"{len(logits_blocks)} logits blocks for {len(nonpad)} non-PAD blocks"
        )
    total: Tensor | None = None
    count = 0
    for logits, block in zip(logits_blocks, nonpad):
        s, n = block_nll_sum(logits, block)
        if s is None:
            continue
        total = s if total is None else add(total, s)
        count += n
    if total is None:
        raise ValueError("sequence has no scored positions")
    return total, count


class AdamW:
    """Adam with decoupled weight decay over named parameter tensors."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, warmup_steps: int = 0):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        return self.lr

    def step(self) -> None:
        lr_t = self.current_lr()
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            if lr_t == 0.0:
                continue  # moments still advance; data writes would be no-ops
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - lr_t * (mhat / (np.sqrt(vhat) + self.eps))
            if self.weight_decay != 0.0:
                p.data = p.data - lr_t * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_users: int = 4
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_steps: int = 0
    patience: int = 3
    mode: str = "full"

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "epochs": self.epochs, "batch_users": self.batch_users,
            "seed": self.seed, "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm, "warmup_steps": self.warmup_steps,
            "patience": self.patience, "mode": self.mode,
        }


def segment_corpus(corpus: UserCorpus, vocab: Vocabulary, cfg: ModelConfig,
                   max_blocks: int | None = None) -> list[BlockSequence]:
    mb = max_blocks if max_blocks is not None else cfg.max_blocks
    seqs = []
    for uid in corpus.user_ids():
        seqs.append(segment_into_blocks(corpus.users[uid], vocab, cfg.block_size,
                                        mb, user_id=uid))
    return seqs


def corpus_nll(cfg: ModelConfig, params: TransformerParams, rec: RecurrenceParams,
               seqs: list[BlockSequence], mode: str) -> tuple[float, int]:
    """Token-weighted NLL over whole user streams (no dropout, no tape)."""
    total = 0.0
    count = 0
    for seq in seqs:
        out = forward_blocks(cfg, params, rec, seq, mode=mode)
        s, n = stream_nll(out.logits, seq)
        total += float(s.data)
        count += n
    return total / count, count


@dataclass
class PretrainResult:
    params: TransformerParams
    rec: RecurrenceParams
    history: list[dict] = field(default_factory=list)
    best_dev_nll: float = math.inf
    best_epoch: int = -1
    steps: int = 0


def _snapshot(named: list[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in named}


def _restore(named: list[tuple[str, Tensor]], snap: dict[str, np.ndarray]) -> None:
    for name, p in named:
        p.data = snap[name].copy()


def pretrain(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_corpus: UserCorpus,
    dev_corpus: UserCorpus,
    vocab: Vocabulary,
    params: TransformerParams | None = None,
    rec: RecurrenceParams | None = None,
) -> PretrainResult:
    """Train on user block streams; early-stop on dev NLL.

    One optimizer step per batch of users; each user's stream is processed
    sequentially (state recurrence is inherently order-dependent) and
    gradients are accumulated with token-count weighting so the step
    direction matches the token-weighted batch mean.
    """
    cfg.validate()
    seed_seq = np.random.SeedSequence(tcfg.seed)
    init_rng, shuffle_rng, drop_rng = (np.random.default_rng(s)
                                       for s in seed_seq.spawn(3))
    if params is None:
        params = TransformerParams.init(cfg, init_rng)
    if rec is None:
        rec = RecurrenceParams.init(cfg, params, init_rng)

    named = params.named() + rec.named()
    opt = AdamW(named, lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                warmup_steps=tcfg.warmup_steps)

    train_seqs = segment_corpus(train_corpus, vocab, cfg)
    dev_seqs = segment_corpus(dev_corpus, vocab, cfg)
    counts = [sequence_target_count(s) for s in train_seqs]

    result = PretrainResult(params=params, rec=rec)
    best_snap = _snapshot(named)
    stale = 0
    step = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(train_seqs))
        epoch_nll = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), tcfg.batch_users):
            idx = order[start:start + tcfg.batch_users]
            batch_tokens = sum(counts[i] for i in idx)
            if batch_tokens == 0:
                continue
            opt.zero_grad()
            batch_nll = 0.0
            for i in idx:
                seq = train_seqs[i]
                with Tape() as tape:
                    out = forward_blocks(cfg, params, rec, seq, mode=tcfg.mode,
                                         train_rng=drop_rng)
                    total, _ = stream_nll(out.logits, seq)
                    tape.backward(total, seed=1.0 / batch_tokens)
                batch_nll += float(total.data)
            if not math.isfinite(batch_nll):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {batch_nll}"
                )
            clip_grad_norm([p for _, p in named], tcfg.clip_norm)
            opt.step()
            step += 1
            epoch_nll += batch_nll
            epoch_tokens += batch_tokens

        dev_nll, _ = corpus_nll(cfg, params, rec, dev_seqs, mode=tcfg.mode)
        try:
            ppl = math.exp(dev_nll)
        except OverflowError:
            ppl = math.inf
        row = {
            "step": step,
            "epoch": epoch,
            "train_nll": epoch_nll / max(epoch_tokens, 1),
            "dev_nll": dev_nll,
            "ppl": ppl,
        }
        result.history.append(row)
        if dev_nll < result.best_dev_nll:
            result.best_dev_nll = dev_nll
            result.best_epoch = epoch
            best_snap = _snapshot(named)
            stale = 0
        else:
            stale += 1
            if stale > tcfg.patience:
                break

    _restore(named, best_snap)
    result.steps = step
    return result
