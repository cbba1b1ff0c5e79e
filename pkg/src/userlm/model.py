"""GPT-style causal decoder blocks with an optional user-state query path.

Pre-layer-norm residual wiring, learned absolute position embeddings that
restart at 0 for every block, and an unembedding tied to the token
embedding. One designated layer (the insert layer) can compute its
attention queries from the concatenation of its hidden input with a
per-user state vector; the key/value transforms there stay standard.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    mul,
    reshape,
    softmax_rows,
    transpose,
)

MASK_FILL = -1e9  # exp(MASK_FILL - max) underflows to exactly 0 in float64


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    block_size: int = 32
    insert_layer: int = 1  # 1-based; query transform extended with user state here
    extract_layer: int = 2  # 1-based; this layer's outputs feed the state update
    max_blocks: int = 4
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not (1 <= self.insert_layer < self.extract_layer <= self.n_layers):
            raise ValueError(
                "layer indices must satisfy 1 <= insert_layer < extract_layer "
                f"<= n_layers, got {self.insert_layer}, {self.extract_layer}, "
                f"{self.n_layers}"
            )
        if self.block_size < 2 or self.max_blocks < 1:
            raise ValueError("block_size must be >= 2 and max_blocks >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "block_size": self.block_size,
            "insert_layer": self.insert_layer,
            "extract_layer": self.extract_layer,
            "max_blocks": self.max_blocks,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


INIT_STD = 0.02


def _normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=shape)


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc: Tensor
    b_fc: Tensor
    w_proj: Tensor
    b_proj: Tensor


@dataclass
class TransformerParams:
    wte: Tensor
    wpe: Tensor
    layers: list[LayerParams]
    lnf_g: Tensor
    lnf_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "TransformerParams":
        cfg.validate()
        d = cfg.d_model

        def p(arr):
            return Tensor(arr, requires_grad=True)

        layers = []
        for _ in range(cfg.n_layers):
            layers.append(
                LayerParams(
                    ln1_g=p(np.ones(d)),
                    ln1_b=p(np.zeros(d)),
                    wq=p(_normal(rng, (d, d))),
                    bq=p(np.zeros(d)),
                    wk=p(_normal(rng, (d, d))),
                    bk=p(np.zeros(d)),
                    wv=p(_normal(rng, (d, d))),
                    bv=p(np.zeros(d)),
                    wo=p(_normal(rng, (d, d))),
                    bo=p(np.zeros(d)),
                    ln2_g=p(np.ones(d)),
                    ln2_b=p(np.zeros(d)),
                    w_fc=p(_normal(rng, (d, 4 * d))),
                    b_fc=p(np.zeros(4 * d)),
                    w_proj=p(_normal(rng, (4 * d, d))),
                    b_proj=p(np.zeros(d)),
                )
            )
        return cls(
            wte=p(_normal(rng, (cfg.vocab_size, d))),
            wpe=p(_normal(rng, (cfg.block_size, d))),
            layers=layers,
            lnf_g=p(np.ones(d)),
            lnf_b=p(np.zeros(d)),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("wte", self.wte), ("wpe", self.wpe)]
        for i, L in enumerate(self.layers):
            for f in (
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                "wo", "bo", "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj",
            ):
                out.append((f"layers.{i}.{f}", getattr(L, f)))
        out.append(("lnf_g", self.lnf_g))
        out.append(("lnf_b", self.lnf_b))
        return out


_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal_disallowed(t: int) -> np.ndarray:
    m = _CAUSAL_CACHE.get(t)
    if m is None:
        m = np.triu(np.ones((t, t), dtype=bool), k=1)
        _CAUSAL_CACHE[t] = m
    return m


def attention(q: Tensor, k: Tensor, v: Tensor, disallowed: np.ndarray,
              n_heads: int, wo: Tensor, bo: Tensor) -> Tensor:
    """Masked multi-head scaled dot-product attention with output projection.

    `disallowed` is a bool [T, T] matrix (True = query row may not attend to
    key column), combining the causal constraint and PAD-key masking.
    """
    t, d = q.shape
    dh = d // n_heads
    qh = transpose(reshape(q, (t, n_heads, dh)), (1, 0, 2))   # [h, T, dh]
    kt = transpose(reshape(k, (t, n_heads, dh)), (1, 2, 0))   # [h, dh, T]
    vh = transpose(reshape(v, (t, n_heads, dh)), (1, 0, 2))   # [h, T, dh]
    scores = mul(matmul(qh, kt), 1.0 / np.sqrt(dh))           # [h, T, T]
    scores = masked_fill(scores, disallowed, MASK_FILL)
    weights = softmax_rows(scores)
    ctx = matmul(weights, vh)                                 # [h, T, dh]
    merged = reshape(transpose(ctx, (1, 0, 2)), (t, d))
    return add(matmul(merged, wo), bo)


def broadcast_rows(vec: Tensor, n_rows: int) -> Tensor:
    """Tile a [d] vector into an [n_rows, d] tensor (grad sums back)."""
    d = vec.shape[-1]
    return add(Tensor(np.zeros((n_rows, d))), reshape(vec, (1, d)))


def forward_block(
    cfg: ModelConfig,
    params: TransformerParams,
    token_ids: np.ndarray,
    attention_mask: np.ndarray,
    user_state: Tensor | None = None,
    joint_query: tuple[Tensor, Tensor] | None = None,
    train_rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run one block through the decoder stack.

    Returns (logits [T, vocab], hidden) where hidden[i] is the output of
    layer i (hidden[0] is the embedding sum). When `user_state` is given,
    the insert layer's queries come from [hidden ; user_state] through the
    `joint_query` (weight, bias) pair; otherwise every layer uses its own
    standard query transform.

    Causality: logits at position i depend only on positions <= i that have
    attention_mask 1; PAD key positions are excluded from every softmax.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    t = token_ids.shape[0]
    if t > cfg.block_size:
        raise ValueError(f"sequence length {t} exceeds block_size {cfg.block_size}")
    rate = cfg.dropout if train_rng is not None else 0.0

    x = add(embedding(params.wte, token_ids), embedding(params.wpe, np.arange(t)))
    x = dropout(x, rate, train_rng)
    disallowed = _causal_disallowed(t) | (np.asarray(attention_mask)[None, :] == 0)

    hidden = [x]
    for li, L in enumerate(params.layers, start=1):
        h = layer_norm(x, L.ln1_g, L.ln1_b)
        if user_state is not None and li == cfg.insert_layer:
            wq_joint, bq_joint = joint_query
            hu = concat([h, broadcast_rows(user_state, t)], axis=-1)
            q = add(matmul(hu, wq_joint), bq_joint)
        else:
            q = add(matmul(h, L.wq), L.bq)
        k = add(matmul(h, L.wk), L.bk)
        v = add(matmul(h, L.wv), L.bv)
        x = add(x, dropout(attention(q, k, v, disallowed, cfg.n_heads, L.wo, L.bo),
                           rate, train_rng))
        h2 = layer_norm(x, L.ln2_g, L.ln2_b)
        m = add(matmul(gelu(add(matmul(h2, L.w_fc), L.b_fc)), L.w_proj), L.b_proj)
        x = add(x, dropout(m, rate, train_rng))
        hidden.append(x)

    xf = layer_norm(x, params.lnf_g, params.lnf_b)
    logits = matmul(xf, transpose(params.wte, (1, 0)))  # tied unembedding
    return logits, hidden


def forward_block_plain(
    cfg: ModelConfig,
    params: TransformerParams,
    token_ids: np.ndarray,
    attention_mask: np.ndarray,
    train_rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Standard causal-LM forward for a single block (no user conditioning)."""
    return forward_block(cfg, params, token_ids, attention_mask,
                         user_state=None, train_rng=train_rng)
