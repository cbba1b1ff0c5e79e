"""Per-user state threaded through a sequence of message blocks.

After each block, the outputs of the extract layer are mean-pooled over
non-PAD positions and folded into a running state vector:

    u_i = tanh(W_s u_{i-1} + W_p pooled_i)

The state from block i-1 conditions the insert layer's attention queries
while block i is processed, so tokens can attend differently depending on
what the same user wrote earlier — without those earlier tokens being in
the attention window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, matmul, mul, reshape, tanh, tsum
from .corpus import BlockSequence
from .model import ModelConfig, TransformerParams, _normal, forward_block

MODES = ("full", "no_history", "frozen_state", "no_recurrence")
# "full": state updated after every block and fed to the next.
# "frozen_state": every block conditioned on u0; no updates.
# "no_recurrence": ablation alias for the same static-state forward; it
#   differs from no_history only in how callers build the block stream.
# "no_history": blocks treated as independent (also static u0 here; callers
#   additionally drop any preceding context from the stream).


@dataclass
class RecurrenceParams:
    w_state: Tensor   # [d, d], applied to the previous state
    w_pooled: Tensor  # [d, d], applied to the pooled block summary
    u0: Tensor        # [d], initial state
    wq_joint: Tensor  # [2d, d], insert-layer query over [hidden ; state]
    bq_joint: Tensor  # [d]

    @classmethod
    def init(cls, cfg: ModelConfig, params: TransformerParams,
             rng: np.random.Generator) -> "RecurrenceParams":
        """Fresh recurrence weights.

        The hidden half of the joint query starts as a copy of the insert
        layer's plain query weights, so an untrained model with zero state
        weights behaves exactly like the plain decoder.
        """
        d = cfg.d_model
        insert = params.layers[cfg.insert_layer - 1]
        wq_joint = np.concatenate([insert.wq.data.copy(), _normal(rng, (d, d))], axis=0)
        return cls(
            w_state=Tensor(_normal(rng, (d, d)), requires_grad=True),
            w_pooled=Tensor(_normal(rng, (d, d)), requires_grad=True),
            u0=Tensor(np.zeros(d), requires_grad=True),
            wq_joint=Tensor(wq_joint, requires_grad=True),
            bq_joint=Tensor(insert.bq.data.copy(), requires_grad=True),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("rec.w_state", self.w_state),
            ("rec.w_pooled", self.w_pooled),
            ("rec.u0", self.u0),
            ("rec.wq_joint", self.wq_joint),
            ("rec.bq_joint", self.bq_joint),
        ]


def pool_extract(hidden: Tensor, attention_mask: np.ndarray) -> Tensor:
    """Mean of hidden rows at non-PAD positions -> [d]."""
    mask = np.asarray(attention_mask, dtype=np.float64)
    count = float(mask.sum())
    if count == 0:
        raise ValueError("cannot pool a block with no non-PAD positions")
    col = reshape(Tensor(mask), (mask.shape[0], 1))
    return mul(tsum(mul(hidden, col), axis=0), 1.0 / count)


def update_user_state(rec: RecurrenceParams, state: Tensor, pooled: Tensor) -> Tensor:
    """u_new = tanh(W_s u + W_p pooled); shapes all [d]."""
    return tanh(add(matmul(rec.w_state, state), matmul(rec.w_pooled, pooled)))


def init_user_state(cfg: ModelConfig, rec: RecurrenceParams, how: str = "zeros",
                    params: TransformerParams | None = None,
                    sample_blocks: list[BlockSequence] | None = None) -> None:
    """Set rec.u0 in place: all-zeros, or the corpus-average pooled output.

    "corpus_average" runs the plain decoder (no user conditioning) over the
    given sample and averages the extract layer's outputs at non-PAD
    positions — a data-driven resting state for users with no history.
    """
    if how == "zeros":
        rec.u0.data = np.zeros(cfg.d_model)
        return
    if how != "corpus_average":
        raise ValueError(f"unknown init mode {how!r}")
    if params is None or not sample_blocks:
        raise ValueError("corpus_average init needs model params and sample blocks")
    total = np.zeros(cfg.d_model)
    count = 0
    for seq in sample_blocks:
        for block in seq.blocks[: seq.num_nonpad_blocks]:
            _, hidden = forward_block(cfg, params, block.token_ids,
                                      block.attention_mask)
            mask = block.attention_mask.astype(bool)
            total += hidden[cfg.extract_layer].data[mask].sum(axis=0)
            count += int(mask.sum())
    if count == 0:
        raise ValueError("sample contains no non-PAD tokens")
    rec.u0.data = total / count


@dataclass
class BlocksOutput:
    logits: list[Tensor]         # one [T, vocab] per non-PAD block, in order
    states: list[Tensor]         # [u0, u1, ..., u_n]; static modes repeat u0
    n_blocks: int                # number of non-PAD blocks processed
    hiddens: list[list[Tensor]]  # per block, per-layer outputs (index 0 = embeddings)


def forward_blocks(
    cfg: ModelConfig,
    params: TransformerParams,
    rec: RecurrenceParams,
    seq: BlockSequence,
    mode: str = "full",
    initial_state: Tensor | None = None,
    train_rng: np.random.Generator | None = None,
) -> BlocksOutput:
    """Process a user's block sequence under the given conditioning mode.

    All-PAD trailing blocks are skipped outright: no forward pass, no state
    update, no logits. In "full" mode the state evolves across blocks; in
    the static modes every block sees the initial state unchanged.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    state = initial_state if initial_state is not None else rec.u0
    joint = (rec.wq_joint, rec.bq_joint)
    logits_out: list[Tensor] = []
    hiddens: list[list[Tensor]] = []
    states = [state]
    for block in seq.blocks:
        if block.is_pad_block:
            continue
        logits, hidden = forward_block(
            cfg, params, block.token_ids, block.attention_mask,
            user_state=state, joint_query=joint, train_rng=train_rng,
        )
        logits_out.append(logits)
        hiddens.append(hidden)
        if mode == "full":
            pooled = pool_extract(hidden[cfg.extract_layer], block.attention_mask)
            state = update_user_state(rec, state, pooled)
        states.append(state)
    return BlocksOutput(logits=logits_out, states=states,
                        n_blocks=len(logits_out), hiddens=hiddens)


def mean_state(output: BlocksOutput) -> Tensor:
    """Average of the per-block states u_1..u_n (excludes u0)."""
    if output.n_blocks == 0:
        raise ValueError("no non-PAD blocks to average states over")
    stacked = output.states[1]
    for s in output.states[2:]:
        stacked = add(stacked, s)
    return mul(stacked, 1.0 / output.n_blocks)
