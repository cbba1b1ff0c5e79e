"""Evaluation: windowed perplexity, classification/regression metrics, and
paired resampling significance tests.

Perplexity here is always exp(total NLL / total scored tokens), aggregated
over instances. An instance pairs a user's history messages with target
messages; only target tokens are scored, and the amount of history is
controlled in whole blocks so the scored token set is identical across
history settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    BlockSequence,
    Message,
    UserCorpus,
    Vocabulary,
    segment_into_blocks,
)
from .model import ModelConfig, TransformerParams
from .recurrence import RecurrenceParams, forward_blocks
from .training import block_nll_sum


@dataclass
class EvalInstance:
    user_id: str
    history: list[Message]
    targets: list[Message]


def tail_eval_instances(corpus: UserCorpus, n_target_messages: int = 3) -> list[EvalInstance]:
    """Per user: last messages are the scoring targets, the rest is history.

    Users with too few messages to leave any history are skipped.
    """
    out = []
    for uid in corpus.user_ids():
        msgs = corpus.users[uid]
        if len(msgs) <= n_target_messages:
            continue
        out.append(EvalInstance(uid, msgs[:-n_target_messages], msgs[-n_target_messages:]))
    return out


def heldout_eval_instances(heldout: UserCorpus, train: UserCorpus) -> list[EvalInstance]:
    """Held-out messages of seen users scored with their training messages
    as history."""
    out = []
    for uid in heldout.user_ids():
        if uid not in train.users:
            raise ValueError(f"held-out user {uid!r} missing from training corpus")
        out.append(EvalInstance(uid, list(train.users[uid]), list(heldout.users[uid])))
    return out


def _segment_unpadded(messages: list[Message], vocab: Vocabulary,
                      block_size: int, user_id: str = "") -> BlockSequence:
    total = sum(len(vocab.encode(m.text)) for m in messages) + max(0, len(messages) - 1)
    mb = max(1, -(-total // block_size))
    return segment_into_blocks(messages, vocab, block_size, mb,
                               pad_to_max=False, user_id=user_id)


def instance_blocks(inst: EvalInstance, vocab: Vocabulary, block_size: int,
                    history_blocks: int, max_target_blocks: int) -> tuple[BlockSequence, int]:
    """Segment one instance: up to `history_blocks` most-recent history
    blocks, then the target blocks. Returns (sequence, n_history_blocks).

    Targets always start a fresh block, so their token/position layout — and
    hence the scored set — does not depend on history_blocks.
    """
    target_seq = segment_into_blocks(inst.targets, vocab, block_size,
                                     max_target_blocks, pad_to_max=False,
                                     user_id=inst.user_id)
    hist: list = []
    if history_blocks > 0 and inst.history:
        hist_seq = _segment_unpadded(inst.history, vocab, block_size)
        hist = hist_seq.blocks[-history_blocks:]
    blocks = hist + target_seq.blocks
    return (
        BlockSequence(user_id=inst.user_id, blocks=blocks,
                      num_nonpad_blocks=len(blocks)),
        len(hist),
    )


@dataclass
class MetricReport:
    metric: str
    value: float
    per_instance: dict[str, float] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "per_instance": self.per_instance,
            "details": self.details,
        }


def perplexity(
    cfg: ModelConfig,
    params: TransformerParams,
    rec: RecurrenceParams,
    vocab: Vocabulary,
    instances: list[EvalInstance],
    history_blocks: int = 0,
    mode: str = "full",
    max_target_blocks: int = 16,
) -> MetricReport:
    """exp(mean NLL) over target tokens, with per-user mean NLLs attached.

    history_blocks=0 scores targets with no preceding context; the state
    then starts at u0 exactly as in the no-history configuration.
    """
    if not instances:
        raise ValueError("no evaluation instances")
    total = 0.0
    count = 0
    per_user: dict[str, float] = {}
    for inst in instances:
        seq, n_hist = instance_blocks(inst, vocab, cfg.block_size,
                                      history_blocks, max_target_blocks)
        out = forward_blocks(cfg, params, rec, seq, mode=mode)
        u_total = 0.0
        u_count = 0
        for logits, block in zip(out.logits[n_hist:], seq.blocks[n_hist:]):
            s, n = block_nll_sum(logits, block)
            if s is None:
                continue
            u_total += float(s.data)
            u_count += n
        if u_count == 0:
            raise ValueError(f"instance {inst.user_id!r} has no scored tokens")
        per_user[inst.user_id] = u_total / u_count
        total += u_total
        count += u_count
    nll = total / count
    return MetricReport(
        metric="perplexity",
        value=math.exp(nll),
        per_instance=per_user,
        details={"nll": nll, "tokens": count, "history_blocks": history_blocks,
                 "mode": mode},
    )


def adjusted_perplexity(ppl_model: float, ppl_reference: float) -> float:
    """Ratio of a model's perplexity to a reference model's on the same data."""
    if ppl_reference <= 0:
        raise ValueError("reference perplexity must be positive")
    return ppl_model / ppl_reference


def history_sweep(
    cfg: ModelConfig,
    params: TransformerParams,
    rec: RecurrenceParams,
    vocab: Vocabulary,
    instances: list[EvalInstance],
    ks: list[int],
    mode: str = "full",
    max_target_blocks: int = 16,
) -> MetricReport:
    """Perplexity as a function of available history blocks.

    details["table"] maps each k to its perplexity; per-user NLL vectors for
    each k are kept under details["per_user_nll"] for paired significance
    testing between settings.
    """
    table: dict[str, float] = {}
    per_user_nll: dict[str, dict[str, float]] = {}
    for k in ks:
        rep = perplexity(cfg, params, rec, vocab, instances, history_blocks=k,
                         mode=mode, max_target_blocks=max_target_blocks)
        table[str(k)] = rep.value
        per_user_nll[str(k)] = rep.per_instance
    return MetricReport(
        metric="history_sweep",
        value=table[str(ks[-1])],
        details={"ks": list(ks), "table": table, "per_user_nll": per_user_nll,
                 "mode": mode},
    )


# ---------------------------------------------------------------------------
# task metrics


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted mean of per-class F1 over classes present in y_true.

    A class with zero precision+recall contributes F1 = 0.
    """
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred lengths differ")
    if not y_true:
        raise ValueError("empty inputs")
    classes = sorted(set(y_true))
    total = 0.0
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = tp + fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += support * f1
    return total / len(y_true)


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d arrays of equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    xm = x - x.mean()
    ym = y - y.mean()
    denom = math.sqrt(float((xm * xm).sum()) * float((ym * ym).sum()))
    if denom == 0.0:
        raise ValueError("zero variance input")
    return float((xm * ym).sum()) / denom


def disattenuated_r(r: float, reliability: float) -> float:
    """Correlation corrected for measurement error: r / sqrt(reliability)."""
    if not (0.0 < reliability <= 1.0):
        raise ValueError(f"reliability must be in (0, 1], got {reliability}")
    return r / math.sqrt(reliability)


# ---------------------------------------------------------------------------
# paired significance tests


@dataclass
class ResampleResult:
    p_value: float
    observed: float
    n_resamples: int

    def to_json_dict(self) -> dict:
        return {"p_value": self.p_value, "observed": self.observed,
                "n_resamples": self.n_resamples}


def _paired_diffs(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("paired samples must be equal-length non-empty 1-d arrays")
    return a - b


def permutation_test(a, b, n_resamples: int = 9999, seed: int = 0,
                     statistic=None) -> ResampleResult:
    """Two-sided paired sign-flip permutation test.

    Under the null the pair labels are exchangeable, so each difference's
    sign is flipped independently; p is the add-one-smoothed fraction of
    resampled |statistic| at least as large as observed.
    """
    d = _paired_diffs(a, b)
    stat = statistic if statistic is not None else (lambda v: float(np.mean(v)))
    obs = stat(d)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_resamples):
        signs = np.where(rng.random(d.size) < 0.5, 1.0, -1.0)
        if abs(stat(d * signs)) >= abs(obs):
            hits += 1
    return ResampleResult(
        p_value=(1 + hits) / (1 + n_resamples),
        observed=obs,
        n_resamples=n_resamples,
    )


def bootstrap_test(a, b, n_resamples: int = 9999, seed: int = 0) -> ResampleResult:
    """Two-sided paired bootstrap on the mean difference, null-centered:
    resampled means are shifted by the observed mean before comparison."""
    d = _paired_diffs(a, b)
    obs = float(np.mean(d))
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, d.size, size=d.size)
        if abs(float(np.mean(d[idx])) - obs) >= abs(obs):
            hits += 1
    return ResampleResult(
        p_value=(1 + hits) / (1 + n_resamples),
        observed=obs,
        n_resamples=n_resamples,
    )


def paired_nll_arrays(per_user_a: dict[str, float],
                      per_user_b: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    """Align two per-user metric dicts on their common keys (sorted)."""
    keys = sorted(set(per_user_a) & set(per_user_b))
    if not keys:
        raise ValueError("no common users between the two reports")
    return (np.asarray([per_user_a[k] for k in keys]),
            np.asarray([per_user_b[k] for k in keys]))
