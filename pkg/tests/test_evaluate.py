import itertools

import numpy as np
import pytest

from lipread import evaluate as ev
from lipread import memdec
from lipread import transformer as tf
from oracles import edit_distance_recursive

TINY = tf.TransformerConfig(layers=1, dim=8, ffn_dim=16, heads=2, dropout=0.0, max_len=48)


def make_model(vocab=6, seed=0):
    dec = tf.DecoderModel(TINY, TINY, vocab, bos_id=1, eos_id=2, rng=np.random.default_rng(seed))
    return memdec.MemoryDecoderModel(dec, kind="memory", n_units=4, ctc_weight=0.3, seed=seed)


def force_eos(model):
    model.params["lmdec/dec/out_head/w"].data[:] = 0.0
    model.params["lmdec/dec/out_head/b"].data[:] = 0.0
    model.params["lmdec/dec/out_head/b"].data[model.decoder.eos_id] = 10.0


class TestGreedy:
    def test_immediate_eos_gives_empty_hypothesis(self):
        model = make_model()
        force_eos(model)
        hyp = ev.greedy_decode(model, np.array([0, 1, 2]), max_len=8)
        assert hyp.tokens == [] and hyp.finished

    def test_score_matches_teacher_forced_rescore(self):
        model = make_model(seed=3)
        x = np.array([0, 3, 2, 1])
        hyp = ev.greedy_decode(model, x, max_len=6)
        rescored = ev.score_tokens(model, x, hyp.tokens, include_eos=hyp.finished)
        assert abs(hyp.score - rescored) < 1e-9

    def test_determinism(self):
        model = make_model(seed=4)
        x = np.array([1, 2, 3, 0])
        h1 = ev.greedy_decode(model, x, max_len=6)
        h2 = ev.greedy_decode(model, x, max_len=6)
        assert h1.tokens == h2.tokens and h1.score == h2.score


class TestBeam:
    def test_width_one_equals_greedy(self):
        model = make_model(seed=5)
        x = np.array([2, 0, 1])
        g = ev.greedy_decode(model, x, max_len=5)
        b = ev.beam_decode(model, x, width=1, max_len=5)
        assert g.tokens == b.tokens
        assert abs(g.score - b.score) < 1e-12

    def test_exhaustive_width_matches_sequence_argmax(self):
        model = make_model(vocab=5, seed=6)
        x = np.array([0, 1, 2, 3])
        max_len = 3
        vocab = model.decoder.vocab_size
        eos = model.decoder.eos_id
        others = [v for v in range(vocab) if v != eos]
        best_score, best_tokens = -np.inf, None
        for finished in (True, False):
            lengths = range(0, max_len) if finished else [max_len]
            for n in lengths:
                for toks in itertools.product(others, repeat=n):
                    s = ev.score_tokens(model, x, list(toks), include_eos=finished)
                    if s > best_score:
                        best_score, best_tokens = s, list(toks)
        hyp = ev.beam_decode(model, x, width=vocab ** max_len, max_len=max_len)
        assert hyp.tokens == best_tokens
        assert abs(hyp.score - best_score) < 1e-9

    @pytest.mark.parametrize("seed", [7, 8, 9])
    def test_beam_never_below_greedy(self, seed):
        model = make_model(seed=seed)
        x = np.array([3, 1, 0, 2, 2])
        g = ev.greedy_decode(model, x, max_len=6)
        for width in (1, 2, 3):
            b = ev.beam_decode(model, x, width=width, max_len=6)
            assert b.score >= g.score - 1e-12


class TestWer:
    def test_identity_and_substitution(self):
        assert ev.wer("a b c", "a b c") == 0.0
        assert ev.wer("a x c", "a b c") == pytest.approx(1.0 / 3.0)

    def test_empty_reference_convention(self):
        assert ev.wer("", "") == 0.0
        assert ev.wer("a b", "") == 2.0  # |hyp| / max(1, |ref|)

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(10)
        vocab = ["aa", "bb", "cc"]
        for _ in range(500):
            hyp = [vocab[i] for i in rng.integers(0, 3, size=rng.integers(0, 7))]
            ref = [vocab[i] for i in rng.integers(0, 3, size=rng.integers(0, 7))]
            errors, ref_len = ev.word_edit_counts(" ".join(hyp), " ".join(ref))
            assert errors == edit_distance_recursive(hyp, ref)
            assert ref_len == len(ref)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(11)
        words = ["w0", "w1", "w2", "w3"]
        relab = {"w0": "z9", "w1": "z3", "w2": "z7", "w3": "z1"}
        for _ in range(50):
            hyp = [words[i] for i in rng.integers(0, 4, size=rng.integers(0, 6))]
            ref = [words[i] for i in rng.integers(0, 4, size=rng.integers(0, 6))]
            a = ev.wer(" ".join(hyp), " ".join(ref))
            b = ev.wer(" ".join(relab[w] for w in hyp), " ".join(relab[w] for w in ref))
            assert a == b

    def test_triangle_sanity_on_raw_counts(self):
        rng = np.random.default_rng(12)
        words = ["u", "v", "w"]
        for _ in range(100):
            a, b, c = (
                " ".join(words[i] for i in rng.integers(0, 3, size=rng.integers(1, 6)))
                for _ in range(3)
            )
            dab, nb = ev.word_edit_counts(a, b)
            dac, _ = ev.word_edit_counts(a, c)
            dcb, _ = ev.word_edit_counts(c, b)
            assert dab / max(1, nb) <= (dac + dcb) / max(1, nb) + 1e-12

    def test_corpus_wer_pools_counts(self):
        assert ev.corpus_wer(["a", "x y"], ["a", "x z"]) == pytest.approx(1.0 / 3.0)


def test_report_rows_and_summary(tmp_path):
    class Utt:
        def __init__(self, id, text):
            self.id = id
            self.text = text

    model = make_model(seed=13)
    force_eos(model)

    class Tok:
        def detokenize(self, ids):
            return ""

    rows, rate = ev.evaluate_corpus(
        model, [Utt("u0", "a b")], Tok(), input_fn=lambda u: np.array([0, 1])
    )
    assert rows[0][:3] == ("u0", "a b", "")
    assert rate == 1.0
    path = tmp_path / "report.csv"
    ev.write_report(path, rows, rate)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,ref,hyp,errors,ref_len"
    assert lines[-1].startswith("corpus_wer,")
