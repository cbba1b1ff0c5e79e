import copy
import math

import numpy as np
import pytest

from userlm.autodiff import Tape, Tensor
from userlm.corpus import (
    Message,
    SyntheticConfig,
    UserCorpus,
    generate_synthetic_corpus,
    segment_into_blocks,
    synthetic_vocabulary,
)
from userlm.model import ModelConfig, TransformerParams
from userlm.recurrence import RecurrenceParams, forward_blocks
from userlm.training import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    block_nll_sum,
    block_target_count,
    corpus_nll,
    pretrain,
    segment_corpus,
    sequence_target_count,
    stream_nll,
)

from conftest import random_messages


def tiny_corpus(n_users=3, seed=0, n_msgs=4):
    rng = np.random.default_rng(seed)
    corpus = UserCorpus()
    for u in range(n_users):
        for i, msg in enumerate(random_messages(rng, n_msgs)):
            corpus.add(f"u{u}", i, msg.text)
    return corpus


class TestTargetCounts:
    def test_full_block_scores_all_but_last(self, tiny_cfg, tiny_vocab):
        seq = segment_into_blocks(random_messages(np.random.default_rng(0), 6),
                                  tiny_vocab, 8, 3)
        full = seq.blocks[0]
        assert np.all(full.attention_mask == 1)
        assert block_target_count(full) == 7

    def test_pad_tail_blocks_score_n_minus_1(self, tiny_vocab):
        seq = segment_into_blocks([Message(0, "w0001 w0002 w0003")],
                                  tiny_vocab, 8, 3)
        assert block_target_count(seq.blocks[0]) == 2
        assert sequence_target_count(seq) == 2

    def test_single_token_block_scores_nothing(self, tiny_vocab):
        seq = segment_into_blocks([Message(0, "w0001")], tiny_vocab, 8, 3)
        assert block_target_count(seq.blocks[0]) == 0
        logits = Tensor(np.zeros((8, 23)))
        s, n = block_nll_sum(logits, seq.blocks[0])
        assert s is None and n == 0


class TestNLL:
    def test_uniform_logits_give_log_vocab(self, tiny_vocab):
        """All-equal logits put probability 1/V on the target: NLL = ln V."""
        seq = segment_into_blocks(random_messages(np.random.default_rng(1), 6),
                                  tiny_vocab, 8, 3)
        block = seq.blocks[0]
        logits = Tensor(np.zeros((8, 23)))
        s, n = block_nll_sum(logits, block)
        assert n == 7
        assert float(s.data) == pytest.approx(7 * math.log(23), rel=1e-14)

    def test_hand_oracle(self, tiny_vocab):
        # one scored position; peaked logits
        seq = segment_into_blocks([Message(0, "w0001 w0002")], tiny_vocab, 8, 1)
        block = seq.blocks[0]
        target = block.token_ids[1]
        logits = np.zeros((8, 23))
        logits[0, target] = 2.0
        s, n = block_nll_sum(Tensor(logits), block)
        # -log softmax[target] = log(22 + e^2) - 2
        expected = math.log(22.0 + math.exp(2.0)) - 2.0
        assert n == 1
        assert float(s.data) == pytest.approx(expected, rel=1e-14)

    def test_separator_is_a_target_pad_is_not(self, tiny_vocab):
        seq = segment_into_blocks([Message(0, "w0001 w0002"),
                                   Message(1, "w0003")], tiny_vocab, 8, 1)
        block = seq.blocks[0]
        # layout: w1 w2 <sep> w3 PAD...; scored targets are ids at 1..3
        valid = block.attention_mask[:-1] & block.attention_mask[1:]
        targets = block.token_ids[np.nonzero(valid)[0] + 1]
        assert 1 in targets.tolist()      # separator id
        assert 0 not in targets.tolist()  # PAD id

    def test_stream_alignment_check(self, tiny_vocab, tiny_cfg):
        seq = segment_into_blocks(random_messages(np.random.default_rng(2), 6),
                                  tiny_vocab, 8, 3)
        with pytest.raises(ValueError, match="logits blocks"):
            stream_nll([Tensor(np.zeros((8, 23)))], seq)


def quad_param(value):
    return [("x", Tensor(np.asarray(value), requires_grad=True))]


def quad_grad(p):
    # f(x) = sum(x^2) / 2 -> grad x
    p[0][1].grad = p[0][1].data.copy()


class TestAdamW:
    def test_first_step_matches_reference(self):
        """After one step with grad g, Adam moves by -lr * g/(|g| + eps)."""
        p = quad_param([1.0, -2.0, 3.0])
        opt = AdamW(p, lr=0.1)
        quad_grad(p)
        g = p[0][1].grad.copy()
        opt.step()
        expected = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p[0][1].data, expected, rtol=1e-12)

    def test_second_step_reference(self):
        p = quad_param([0.5])
        opt = AdamW(p, lr=0.1)
        m = v = 0.0
        x = 0.5
        for t in range(1, 3):
            p[0][1].grad = np.array([x])
            g = x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            x = x - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
            opt.step()
        np.testing.assert_allclose(p[0][1].data, [x], rtol=1e-12)

    def test_decoupled_decay_shrinks_without_gradient_signal(self):
        p = quad_param([4.0])
        opt = AdamW(p, lr=0.1, weight_decay=0.5)
        p[0][1].grad = np.array([0.0])
        opt.step()
        # zero grad: adam term is 0/(0+eps)=0, decay multiplies by (1-lr*wd)
        np.testing.assert_allclose(p[0][1].data, [4.0 * (1 - 0.1 * 0.5)],
                                   rtol=1e-12)

    def test_warmup_zero_lr_is_bitwise_noop_on_data(self):
        p = quad_param([1.0, 2.0])
        before = p[0][1].data.copy()
        opt = AdamW(p, lr=0.0, warmup_steps=0)
        quad_grad(p)
        opt.step()
        assert np.array_equal(p[0][1].data, before)
        assert np.any(opt.m["x"] != 0)  # moments still advance

    def test_warmup_schedule(self):
        opt = AdamW(quad_param([1.0]), lr=1.0, warmup_steps=4)
        lrs = []
        for _ in range(6):
            lrs.append(opt.current_lr())
            opt.t += 1
        assert lrs == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]

    def test_skips_params_without_grad(self):
        p = quad_param([1.0]) + [("y", Tensor(np.array([5.0]), requires_grad=True))]
        opt = AdamW(p, lr=0.1, weight_decay=0.5)
        p[0][1].grad = np.array([1.0])
        opt.step()
        assert np.array_equal(p[1][1].data, [5.0])  # no grad, not even decayed

    def test_state_arrays_round_trip(self):
        p = quad_param([1.0, 2.0])
        opt = AdamW(p, lr=0.1)
        quad_grad(p)
        opt.step()
        arrays = opt.state_arrays()
        opt2 = AdamW(quad_param([1.0, 2.0]), lr=0.1)
        opt2.load_state_arrays(arrays, t=opt.t)
        assert opt2.t == 1
        np.testing.assert_array_equal(opt2.m["x"], opt.m["x"])
        np.testing.assert_array_equal(opt2.v["x"], opt.v["x"])


class TestPretrain:
    @pytest.fixture
    def setting(self, tiny_cfg, tiny_vocab):
        train = tiny_corpus(n_users=4, seed=3)
        dev = tiny_corpus(n_users=2, seed=9)
        return tiny_cfg, tiny_vocab, train, dev

    def test_loss_decreases_on_overfit(self, setting):
        cfg, vocab, train, dev = setting
        tcfg = TrainConfig(lr=3e-3, epochs=8, batch_users=4, seed=0,
                           weight_decay=0.0, patience=10)
        res = pretrain(cfg, tcfg, train, train, vocab)
        first, last = res.history[0], res.history[-1]
        assert last["dev_nll"] < first["dev_nll"]
        assert res.best_dev_nll <= min(r["dev_nll"] for r in res.history)

    def test_deterministic_given_seed(self, setting):
        cfg, vocab, train, dev = setting
        tcfg = TrainConfig(lr=1e-3, epochs=2, seed=42)
        a = pretrain(cfg, tcfg, train, dev, vocab)
        b = pretrain(cfg, tcfg, train, dev, vocab)
        for (n1, p1), (n2, p2) in zip(a.params.named() + a.rec.named(),
                                       b.params.named() + b.rec.named()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data), n1
        assert a.history == b.history

    def test_seed_changes_outcome(self, setting):
        cfg, vocab, train, dev = setting
        a = pretrain(cfg, TrainConfig(epochs=1, seed=0), train, dev, vocab)
        b = pretrain(cfg, TrainConfig(epochs=1, seed=1), train, dev, vocab)
        assert not np.array_equal(a.params.wte.data, b.params.wte.data)

    def test_restores_best_epoch_weights(self, setting):
        cfg, vocab, train, dev = setting
        tcfg = TrainConfig(lr=0.5, epochs=6, seed=0, patience=10)  # unstable lr
        res = pretrain(cfg, tcfg, train, dev, vocab)
        seqs = segment_corpus(dev, vocab, cfg)
        dev_nll, _ = corpus_nll(cfg, res.params, res.rec, seqs, mode="full")
        assert dev_nll == pytest.approx(res.best_dev_nll, rel=1e-12)

    def test_divergence_raises(self, tiny_cfg, tiny_vocab):
        cfg, vocab = tiny_cfg, tiny_vocab
        # single-block users so no later attention softmax sees the poison
        # before the loss does
        corpus = UserCorpus()
        for u in range(2):
            corpus.add(f"u{u}", 0, "w0001 w0002 w0003")
        params = TransformerParams.init(cfg, np.random.default_rng(0))
        rec = RecurrenceParams.init(cfg, params, np.random.default_rng(0))
        params.layers[-1].b_proj.data[:] = np.inf  # inf residual -> NaN loss
        with pytest.raises(TrainingDiverged):
            pretrain(cfg, TrainConfig(epochs=1), corpus, corpus, vocab,
                     params=params, rec=rec)

    def test_early_stop_respects_patience(self, setting):
        cfg, vocab, train, dev = setting
        tcfg = TrainConfig(lr=1.0, epochs=30, seed=0, patience=1)
        res = pretrain(cfg, tcfg, train, dev, vocab)
        assert len(res.history) < 30

    def test_history_rows_have_metrics(self, setting):
        cfg, vocab, train, dev = setting
        res = pretrain(cfg, TrainConfig(epochs=1), train, dev, vocab)
        row = res.history[0]
        assert set(row) == {"step", "epoch", "train_nll", "dev_nll", "ppl"}
        assert row["ppl"] == pytest.approx(math.exp(row["dev_nll"]), rel=1e-12)

    def test_token_weighted_batch_gradient(self, tiny_cfg, tiny_vocab):
        """One batch of two users must average grads by token count, i.e.
        equal gradient contribution per scored token, not per user."""
        cfg, vocab = tiny_cfg, tiny_vocab
        corpus = tiny_corpus(n_users=2, seed=5)
        seqs = segment_corpus(corpus, vocab, cfg)
        params = TransformerParams.init(cfg, np.random.default_rng(1))
        rec = RecurrenceParams.init(cfg, params, np.random.default_rng(2))
        named = params.named() + rec.named()
        counts = [sequence_target_count(s) for s in seqs]
        batch_tokens = sum(counts)

        for _, p in named:
            p.grad = None
        for seq in seqs:
            with Tape() as tape:
                out = forward_blocks(cfg, params, rec, seq)
                total, _ = stream_nll(out.logits, seq)
                tape.backward(total, seed=1.0 / batch_tokens)
        accumulated = params.wte.grad.copy()

        # reference: sum both users' full NLL, divide once
        for _, p in named:
            p.grad = None
        grand = None
        with Tape() as tape:
            from userlm.autodiff import add as tadd
            for seq in seqs:
                out = forward_blocks(cfg, params, rec, seq)
                total, _ = stream_nll(out.logits, seq)
                grand = total if grand is None else tadd(grand, total)
            tape.backward(grand, seed=1.0 / batch_tokens)
        np.testing.assert_allclose(accumulated, params.wte.grad, rtol=1e-10,
                                   atol=1e-15)


class TestSegmentCorpus:
    def test_one_sequence_per_user_in_order(self, tiny_cfg, tiny_vocab):
        corpus = tiny_corpus(n_users=3)
        seqs = segment_corpus(corpus, tiny_vocab, tiny_cfg)
        assert [s.user_id for s in seqs] == ["u0", "u1", "u2"]

    def test_max_blocks_override(self, tiny_cfg, tiny_vocab):
        corpus = tiny_corpus(n_users=1, n_msgs=8)
        seqs = segment_corpus(corpus, tiny_vocab, tiny_cfg, max_blocks=1)
        assert len(seqs[0].blocks) == 1
