import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from userlm.corpus import (
    PAD_ID,
    SEP_ID,
    UNK_ID,
    CorpusFormatError,
    Message,
    SplitFractions,
    SyntheticConfig,
    UserAttributes,
    UserCorpus,
    Vocabulary,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    segment_into_blocks,
    split_users,
    synthetic_vocabulary,
    synthetic_word,
)


def make_vocab(words):
    return Vocabulary(["<|pad|>", "<|insep|>", "<|unk|>"] + list(words))


class TestCorpusIO:
    def test_load_sorts_by_timestamp(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("u1\t20\tsecond\nu1\t10\tfirst\n")
        corpus = load_corpus(p)
        assert corpus.n_users == 1
        assert [m.text for m in corpus.users["u1"]] == ["first", "second"]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("")
        assert load_corpus(p).n_users == 0

    def test_malformed_record_names_line(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("u1\t10\tok\nnot-enough-columns\n")
        with pytest.raises(CorpusFormatError, match=":2"):
            load_corpus(p)

    def test_bad_timestamp_names_line(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("u1\tnot-a-number\ttext\n")
        with pytest.raises(CorpusFormatError, match=":1"):
            load_corpus(p)

    def test_duplicate_user_block_merges_with_warning(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("u1\t1\ta\nu2\t1\tb\nu1\t2\tc\n")
        warnings = []
        corpus = load_corpus(p, on_warning=warnings.append)
        assert len(corpus.users["u1"]) == 2
        assert warnings and "u1" in warnings[0]

    def test_round_trip_bytes(self, tmp_path):
        corpus, _ = generate_synthetic_corpus(SyntheticConfig(n_users=5, seed=3))
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        save_corpus(corpus, p1)
        save_corpus(load_corpus(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_escaped_text_round_trip(self, tmp_path):
        corpus = UserCorpus()
        corpus.add("u1", 1, "line\nbreak\tand\\slash")
        p = tmp_path / "c.tsv"
        save_corpus(corpus, p)
        assert load_corpus(p).users["u1"][0].text == "line\nbreak\tand\\slash"

    @given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_any_text_survives_round_trip(self, text):
        from userlm.corpus import _escape, _unescape

        assert _unescape(_escape(text)) == text
        assert "\n" not in _escape(text) and "\t" not in _escape(text)


class TestVocabulary:
    def test_reserved_ids(self):
        v = make_vocab(["a", "b"])
        assert v.encode("<|pad|> <|insep|> <|unk|>") == [PAD_ID, SEP_ID, UNK_ID]

    def test_unknown_maps_to_unk(self):
        v = make_vocab(["a"])
        assert v.encode("a zzz") == [3, UNK_ID]

    def test_build_orders_by_frequency_then_lexicographic(self):
        corpus = UserCorpus()
        corpus.add("u", 1, "b b a c c")
        v = Vocabulary.build(corpus)
        assert v.tokens[3:] == ["b", "c", "a"]

    def test_save_load_round_trip(self, tmp_path):
        v = make_vocab(["x", "y"])
        p = tmp_path / "v.txt"
        v.save(p)
        assert Vocabulary.load(p) == v

    def test_load_rejects_missing_reserved(self, tmp_path):
        p = tmp_path / "v.txt"
        p.write_text("a\nb\nc\n")
        with pytest.raises(CorpusFormatError):
            Vocabulary.load(p)

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError):
            make_vocab(["a", "a"])


class TestSegmentation:
    def test_reference_layout(self):
        # ["a b c", "d e"], block_size 8 -> [a,b,c,SEP,d,e,PAD,PAD]
        v = make_vocab(["a", "b", "c", "d", "e"])
        seq = segment_into_blocks(
            [Message(1, "a b c"), Message(2, "d e")], v, block_size=8, max_blocks=1
        )
        a, b, c, d, e = (v.index[t] for t in "abcde")
        assert seq.blocks[0].token_ids.tolist() == [a, b, c, SEP_ID, d, e, PAD_ID, PAD_ID]
        assert seq.blocks[0].attention_mask.tolist() == [1, 1, 1, 1, 1, 1, 0, 0]
        assert seq.num_nonpad_blocks == 1

    def test_exactly_full_block_has_no_pad(self):
        v = make_vocab([f"t{i}" for i in range(8)])
        msg = Message(1, " ".join(f"t{i}" for i in range(8)))
        seq = segment_into_blocks([msg], v, block_size=8, max_blocks=2)
        assert seq.blocks[0].attention_mask.sum() == 8
        assert seq.blocks[1].is_pad_block

    def test_separator_count_equals_messages_minus_one(self):
        rng = np.random.default_rng(0)
        v = synthetic_vocabulary(30)
        msgs = [Message(i, " ".join(f"w{j:04d}" for j in rng.integers(0, 30, 5)))
                for i in range(7)]
        seq = segment_into_blocks(msgs, v, block_size=16, max_blocks=10)
        n_sep = sum(int((b.token_ids == SEP_ID).sum()) for b in seq.blocks)
        assert n_sep == 6

    def test_truncation_keeps_earliest(self):
        v = make_vocab([f"t{i}" for i in range(20)])
        msgs = [Message(i, f"t{i}") for i in range(20)]  # 20 tokens + 19 seps
        seq = segment_into_blocks(msgs, v, block_size=8, max_blocks=2)
        assert seq.num_nonpad_blocks == 2
        # first token of the stream survives; the latest messages do not
        assert seq.blocks[0].token_ids[0] == v.index["t0"]
        flat = np.concatenate([b.token_ids for b in seq.blocks])
        assert v.index["t19"] not in flat

    def test_long_message_straddles_blocks(self):
        v = make_vocab([f"t{i}" for i in range(12)])
        msg = Message(1, " ".join(f"t{i}" for i in range(12)))
        seq = segment_into_blocks([msg], v, block_size=8, max_blocks=2)
        assert seq.num_nonpad_blocks == 2
        segs = seq.message_segments[0]
        assert [(b, s, e) for b, s, e in segs] == [(0, 0, 8), (1, 0, 4)]

    def test_message_boundaries_exclude_separators(self):
        v = make_vocab(["a", "b"])
        seq = segment_into_blocks([Message(1, "a a"), Message(2, "b")], v, 8, 1)
        assert seq.blocks[0].message_boundaries == [(0, 2), (3, 4)]

    def test_empty_message_list_rejected(self):
        with pytest.raises(ValueError):
            segment_into_blocks([], make_vocab(["a"]), 8, 1)

    def test_mask_zero_exactly_at_pad(self):
        rng = np.random.default_rng(4)
        v = synthetic_vocabulary(30)
        msgs = [Message(i, " ".join(f"w{j:04d}" for j in rng.integers(0, 30, 7)))
                for i in range(5)]
        seq = segment_into_blocks(msgs, v, block_size=8, max_blocks=8)
        for block in seq.blocks:
            np.testing.assert_array_equal(block.attention_mask == 0,
                                          block.token_ids == PAD_ID)
            # no PAD before a non-PAD inside any block
            mask = block.attention_mask
            assert np.all(np.diff(mask) <= 0)

    def test_detokenized_content_round_trips(self):
        v = make_vocab(["a", "b", "c"])
        msgs = [Message(1, "a b"), Message(2, "c"), Message(3, "b b a")]
        seq = segment_into_blocks(msgs, v, block_size=4, max_blocks=3)
        texts = []
        for mi in sorted(seq.message_segments):
            ids = []
            for b, s, e in seq.message_segments[mi]:
                ids.extend(seq.blocks[b].token_ids[s:e].tolist())
            texts.append(v.decode(ids))
        assert texts == ["a b", "c", "b b a"]


class TestSyntheticGenerator:
    def test_determinism(self):
        cfg = SyntheticConfig(n_users=10, seed=42)
        c1, a1 = generate_synthetic_corpus(cfg)
        c2, a2 = generate_synthetic_corpus(cfg)
        assert [m.text for u in c1.users.values() for m in u] == \
               [m.text for u in c2.users.values() for m in u]
        assert a1.bias == a2.bias and a1.subvocab == a2.subvocab

    def test_empirical_bias_rate(self):
        # enough tokens per user to measure the rate reliably
        cfg = SyntheticConfig(n_users=6, messages_per_user=(100, 100),
                              tokens_per_message=(12, 12), bias=0.9, seed=7)
        corpus, attrs = generate_synthetic_corpus(cfg)
        for uid, msgs in corpus.users.items():
            sub = {synthetic_word(w) for w in attrs.subvocab[uid]}
            toks = [t for m in msgs for t in m.text.split()]
            rate = sum(t in sub for t in toks) / len(toks)
            # tokens outside the subvocab draw can still land in it by chance
            floor = 0.9 + (1 - 0.9) * cfg.subvocab_size / cfg.vocab_size
            assert abs(rate - floor) < 0.03, (uid, rate)

    def test_style_groups_share_subvocab(self):
        cfg = SyntheticConfig(n_users=9, n_style_groups=3, seed=1)
        _, attrs = generate_synthetic_corpus(cfg)
        by_group = {}
        for uid, g in attrs.group.items():
            by_group.setdefault(g, set()).add(tuple(attrs.subvocab[uid]))
        assert set(by_group) == {0, 1, 2}
        for subs in by_group.values():
            assert len(subs) == 1  # identical subvocab within a group

    def test_bias_range_sampled_per_user(self):
        cfg = SyntheticConfig(n_users=20, bias=(0.2, 0.9), seed=5)
        _, attrs = generate_synthetic_corpus(cfg)
        values = list(attrs.bias.values())
        assert len(set(values)) > 10
        assert all(0.2 <= b <= 0.9 for b in values)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            SyntheticConfig(bias=1.5).validate()
        with pytest.raises(ValueError):
            SyntheticConfig(subvocab_size=300, vocab_size=200).validate()

    def test_attrs_json_round_trip(self):
        _, attrs = generate_synthetic_corpus(SyntheticConfig(n_users=4, seed=9))
        again = UserAttributes.from_json_dict(attrs.to_json_dict())
        assert again.bias == attrs.bias
        assert again.subvocab == attrs.subvocab


class TestSplits:
    @pytest.fixture
    def corpus(self):
        c, _ = generate_synthetic_corpus(SyntheticConfig(n_users=30, seed=12))
        return c

    def test_unseen_users_disjoint_from_train(self, corpus):
        s = split_users(corpus, SplitFractions(), seed=0)
        train = set(s.train.user_ids())
        assert train.isdisjoint(s.dev_unseen.user_ids())
        assert train.isdisjoint(s.test_unseen.user_ids())
        assert set(s.dev_unseen.user_ids()).isdisjoint(s.test_unseen.user_ids())

    def test_fraction_counts(self, corpus):
        s = split_users(corpus, SplitFractions(dev_unseen=0.2, test_unseen=0.1), seed=0)
        assert s.dev_unseen.n_users == 6
        assert s.test_unseen.n_users == 3
        assert s.train.n_users == 21

    def test_temporal_holdout(self, corpus):
        s = split_users(corpus, SplitFractions(), seed=0)
        assert s.dev_seen_heldout.n_users > 0
        for uid, held in s.dev_seen_heldout.users.items():
            retained_max = max(m.timestamp for m in s.train.users[uid])
            assert all(m.timestamp >= retained_max for m in held)

    def test_determinism(self, corpus):
        s1 = split_users(corpus, SplitFractions(), seed=4)
        s2 = split_users(corpus, SplitFractions(), seed=4)
        assert s1.train.user_ids() == s2.train.user_ids()
        assert s1.dev_unseen.user_ids() == s2.dev_unseen.user_ids()

    def test_too_few_users_rejected(self):
        c, _ = generate_synthetic_corpus(SyntheticConfig(n_users=2, seed=0))
        with pytest.raises(ValueError):
            split_users(c, SplitFractions(dev_unseen=0.5, test_unseen=0.5), seed=0)
