"""Per-user message streams: loading, tokenization, block segmentation,
synthetic generation, and train/eval splits.

Corpus file format (UTF-8, line-delimited):
    user_id<TAB>timestamp<TAB>text
with backslash, tab, and newline escaped in text as \\\\, \\t, \\n.

Vocabulary file format: one token per line, line number = token id; the
first three lines are the reserved PAD, separator, and UNK tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD_TOKEN = "<|pad|>"
SEP_TOKEN = "<|insep|>"
UNK_TOKEN = "<|unk|>"
PAD_ID = 0
SEP_ID = 1
UNK_ID = 2
_RESERVED = (PAD_TOKEN, SEP_TOKEN, UNK_TOKEN)


class CorpusFormatError(ValueError):
    pass


@dataclass
class Message:
    timestamp: int
    text: str


@dataclass
class UserCorpus:
    """Temporally ordered message sequences keyed by user.

    Per user, messages are sorted ascending by timestamp with ties broken
    by input order; user ids are unique and keep first-appearance order.
    """

    users: dict[str, list[Message]] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_messages(self) -> int:
        return sum(len(m) for m in self.users.values())

    def user_ids(self) -> list[str]:
        return list(self.users.keys())

    def add(self, user_id: str, timestamp: int, text: str) -> None:
        self.users.setdefault(user_id, []).append(Message(timestamp, text))

    def sort_messages(self) -> None:
        for msgs in self.users.values():
            msgs.sort(key=lambda m: m.timestamp)  # stable: ties keep input order

    def subset(self, user_ids) -> "UserCorpus":
        return UserCorpus({u: list(self.users[u]) for u in user_ids})


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "n":
                out.append("\n")
            elif nxt == "t":
                out.append("\t")
            elif nxt == "\\":
                out.append("\\")
            else:
                out.append(c)
                out.append(nxt)
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def load_corpus(path, on_warning=None) -> UserCorpus:
    """Read a corpus file, grouping by user and sorting by timestamp.

    Malformed records raise with the offending line number. A user id
    appearing in non-contiguous line groups is merged, with a warning.
    """
    corpus = UserCorpus()
    last_user = None
    seen_closed: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected user_id<TAB>timestamp<TAB>text"
                )
            user_id, ts_raw, text = parts
            try:
                ts = int(ts_raw)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}: timestamp {ts_raw!r} is not an integer"
                ) from None
            if user_id != last_user:
                if last_user is not None:
                    seen_closed.add(last_user)
                if user_id in seen_closed and on_warning is not None:
                    on_warning(f"{path}:{lineno}: duplicate block for user {user_id!r}, merging")
                last_user = user_id
            corpus.add(user_id, ts, _unescape(text))
    corpus.sort_messages()
    return corpus


def save_corpus(corpus: UserCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user_id, msgs in corpus.users.items():
            for m in msgs:
                fh.write(f"{user_id}\t{m.timestamp}\t{_escape(m.text)}\n")


# ---------------------------------------------------------------------------
# vocabulary and tokenization


class Vocabulary:
    """Whitespace-token vocabulary with reserved PAD/separator/UNK ids."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != _RESERVED:
            tokens = list(_RESERVED) + [t for t in tokens if t not in _RESERVED]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)

    @classmethod
    def build(cls, corpus: UserCorpus, max_size: int | None = None) -> "Vocabulary":
        """Collect tokens from a corpus, most frequent first, ties lexicographic."""
        counts: dict[str, int] = {}
        for msgs in corpus.users.values():
            for m in msgs:
                for tok in m.text.split():
                    counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[: max_size - len(_RESERVED)]
        return cls(list(_RESERVED) + ordered)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tuple(tokens[:3]) != _RESERVED:
            raise CorpusFormatError(
                f"{path}: first three vocabulary lines must be {_RESERVED}"
            )
        return cls(tokens)


# ---------------------------------------------------------------------------
# block segmentation


@dataclass
class Block:
    token_ids: np.ndarray          # int64[block_size]
    attention_mask: np.ndarray     # {0,1}[block_size], 0 exactly at PAD
    message_boundaries: list[tuple[int, int]]  # per-message [start, end) spans
    is_pad_block: bool

    @property
    def n_tokens(self) -> int:
        return int(self.attention_mask.sum())


@dataclass
class BlockSequence:
    user_id: str
    blocks: list[Block]
    num_nonpad_blocks: int
    # message index -> [(block index, start, end)] covering that message's tokens
    message_segments: dict[int, list[tuple[int, int, int]]] = field(default_factory=dict)

    def nonpad_blocks(self) -> list[Block]:
        return self.blocks[: self.num_nonpad_blocks]


def segment_into_blocks(
    messages: list[Message],
    vocab: Vocabulary,
    block_size: int,
    max_blocks: int,
    pad_to_max: bool = True,
    user_id: str = "",
) -> BlockSequence:
    """Lay a user's messages out as fixed-size blocks.

    Messages are placed in order with one separator token between
    consecutive messages (none after the last). The final partial block is
    PAD-filled; sequences longer than max_blocks keep the earliest blocks;
    shorter ones are extended with all-PAD blocks when pad_to_max is set.
    A message longer than a block simply straddles block boundaries.
    """
    if block_size < 2:
        raise ValueError("block_size must be >= 2")
    if max_blocks < 1:
        raise ValueError("max_blocks must be >= 1")
    if not messages:
        raise ValueError("cannot segment an empty message list")

    stream: list[int] = []
    owners: list[int] = []  # message index owning each stream position, -1 for separators
    for mi, msg in enumerate(messages):
        if mi > 0:
            stream.append(SEP_ID)
            owners.append(-1)
        ids = vocab.encode(msg.text)
        stream.extend(ids)
        owners.extend([mi] * len(ids))

    limit = block_size * max_blocks
    stream = stream[:limit]
    owners = owners[:limit]

    n_nonpad = (len(stream) + block_size - 1) // block_size
    blocks: list[Block] = []
    segments: dict[int, list[tuple[int, int, int]]] = {}
    for b in range(n_nonpad):
        chunk = stream[b * block_size : (b + 1) * block_size]
        own = owners[b * block_size : (b + 1) * block_size]
        n = len(chunk)
        ids = np.full(block_size, PAD_ID, dtype=np.int64)
        ids[:n] = chunk
        mask = np.zeros(block_size, dtype=np.int64)
        mask[:n] = 1
        bounds: list[tuple[int, int]] = []
        start = None
        for pos in range(n + 1):
            mi = own[pos] if pos < n else None
            prev = own[pos - 1] if pos > 0 else None
            if pos > 0 and prev is not None and prev >= 0 and (pos == n or mi != prev):
                bounds.append((start, pos))
                segments.setdefault(prev, []).append((b, start, pos))
                start = None
            if pos < n and mi >= 0 and (pos == 0 or own[pos - 1] != mi):
                start = pos
        blocks.append(Block(ids, mask, bounds, is_pad_block=False))

    if pad_to_max:
        while len(blocks) < max_blocks:
            blocks.append(
                Block(
                    np.full(block_size, PAD_ID, dtype=np.int64),
                    np.zeros(block_size, dtype=np.int64),
                    [],
                    is_pad_block=True,
                )
            )

    return BlockSequence(
        user_id=user_id,
        blocks=blocks,
        num_nonpad_blocks=n_nonpad,
        message_segments=segments,
    )


# ---------------------------------------------------------------------------
# synthetic corpus generation


@dataclass
class SyntheticConfig:
    """Controls the per-user latent-style generator.

    Each user gets a preferred subvocabulary; every generated token comes
    from it with probability `bias`, otherwise from the full vocabulary.
    `bias` may be a single float or a (low, high) range sampled per user.
    With `n_style_groups` set, users share one of that many subvocabularies
    instead of each drawing their own.
    """

    n_users: int = 100
    messages_per_user: tuple[int, int] = (15, 25)
    tokens_per_message: tuple[int, int] = (8, 14)
    vocab_size: int = 200
    subvocab_size: int = 20
    bias: float | tuple[float, float] = 0.85
    n_style_groups: int | None = None
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.bias_range()
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"bias must lie in [0, 1), got {self.bias}")
        if self.subvocab_size >= self.vocab_size:
            raise ValueError("subvocab_size must be smaller than vocab_size")
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")

    def bias_range(self) -> tuple[float, float]:
        if isinstance(self.bias, (tuple, list)):
            return float(self.bias[0]), float(self.bias[1])
        return float(self.bias), float(self.bias)


@dataclass
class UserAttributes:
    """Latent generator state per user, kept for building labeled tasks."""

    bias: dict[str, float] = field(default_factory=dict)
    subvocab: dict[str, list[int]] = field(default_factory=dict)
    group: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"bias": self.bias, "subvocab": self.subvocab, "group": self.group}

    @classmethod
    def from_json_dict(cls, d: dict) -> "UserAttributes":
        return cls(
            bias={k: float(v) for k, v in d["bias"].items()},
            subvocab={k: list(map(int, v)) for k, v in d["subvocab"].items()},
            group={k: int(v) for k, v in d["group"].items()},
        )


def synthetic_word(i: int) -> str:
    return f"w{i:04d}"


def generate_synthetic_corpus(cfg: SyntheticConfig) -> tuple[UserCorpus, UserAttributes]:
    """Draw a corpus with per-user preferred-subvocabulary token bias.

    Deterministic given cfg.seed. Returns the corpus plus the latent
    attributes (per-user bias, subvocabulary, style group) so labeled
    tasks can be constructed from generator state.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    words = np.arange(cfg.vocab_size)
    lo, hi = cfg.bias_range()

    group_vocabs = None
    if cfg.n_style_groups is not None:
        group_vocabs = [
            rng.choice(words, size=cfg.subvocab_size, replace=False)
            for _ in range(cfg.n_style_groups)
        ]

    corpus = UserCorpus()
    attrs = UserAttributes()
    for ui in range(cfg.n_users):
        user_id = f"u{ui:05d}"
        if group_vocabs is not None:
            gi = ui % cfg.n_style_groups
            sub = group_vocabs[gi]
        else:
            gi = -1
            sub = rng.choice(words, size=cfg.subvocab_size, replace=False)
        bias = lo if lo == hi else float(rng.uniform(lo, hi))
        attrs.bias[user_id] = bias
        attrs.subvocab[user_id] = [int(w) for w in sub]
        attrs.group[user_id] = gi

        n_msgs = int(rng.integers(cfg.messages_per_user[0], cfg.messages_per_user[1] + 1))
        for mi in range(n_msgs):
            n_tok = int(rng.integers(cfg.tokens_per_message[0], cfg.tokens_per_message[1] + 1))
            from_sub = rng.random(n_tok) < bias
            picks = np.where(
                from_sub,
                sub[rng.integers(0, cfg.subvocab_size, size=n_tok)],
                words[rng.integers(0, cfg.vocab_size, size=n_tok)],
            )
            text = " ".join(synthetic_word(int(w)) for w in picks)
            corpus.add(user_id, 1_000_000 * ui + mi, text)
    corpus.sort_messages()
    return corpus, attrs


def synthetic_vocabulary(vocab_size: int) -> Vocabulary:
    """The full closed vocabulary the generator draws from."""
    return Vocabulary(list(_RESERVED) + [synthetic_word(i) for i in range(vocab_size)])


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitFractions:
    dev_unseen: float = 0.1
    test_unseen: float = 0.1
    seen_users: float = 0.2        # fraction of train users contributing held-out tails
    heldout_messages: float = 0.2  # tail fraction of those users' messages

    def validate(self) -> None:
        if self.dev_unseen + self.test_unseen > 1.0:
            raise ValueError("unseen fractions sum to more than 1")


@dataclass
class CorpusSplits:
    train: UserCorpus
    dev_unseen: UserCorpus
    test_unseen: UserCorpus
    dev_seen_heldout: UserCorpus


def split_users(corpus: UserCorpus, fractions: SplitFractions, seed: int) -> CorpusSplits:
    """Partition users into train / unseen dev / unseen test, then hold out
    the last-by-timestamp tail of messages for a sample of train users.

    Unseen splits contain whole users disjoint from train. The seen-heldout
    split reuses train user ids; every held-out message is
    timestamp-greater-or-equal to every retained train message of its user.
    """
    fractions.validate()
    rng = np.random.default_rng(seed)
    ids = corpus.user_ids()
    n = len(ids)
    n_dev = int(round(n * fractions.dev_unseen))
    n_test = int(round(n * fractions.test_unseen))
    if n_dev + n_test >= n:
        raise ValueError(
            f"too few users ({n}) for unseen fractions "
            f"{fractions.dev_unseen}+{fractions.test_unseen}"
        )
    order = list(rng.permutation(n))
    dev_ids = sorted(ids[i] for i in order[:n_dev])
    test_ids = sorted(ids[i] for i in order[n_dev : n_dev + n_test])
    train_ids = sorted(ids[i] for i in order[n_dev + n_test :])

    train = corpus.subset(train_ids)
    n_seen = int(round(len(train_ids) * fractions.seen_users))
    seen_order = list(rng.permutation(len(train_ids)))
    seen_ids = sorted(train_ids[i] for i in seen_order[:n_seen])

    heldout = UserCorpus()
    for uid in seen_ids:
        msgs = train.users[uid]
        k = int(round(len(msgs) * fractions.heldout_messages))
        if k == 0 or k >= len(msgs):
            continue
        heldout.users[uid] = msgs[len(msgs) - k :]
        train.users[uid] = msgs[: len(msgs) - k]

    return CorpusSplits(
        train=train,
        dev_unseen=corpus.subset(dev_ids),
        test_unseen=corpus.subset(test_ids),
        dev_seen_heldout=heldout,
    )
