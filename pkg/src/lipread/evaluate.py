"""Autoregressive decoding and word-error-rate scoring.

Models expose ``context_for(inputs)`` and ``.decoder``; decoding is greedy
by default (no external language model, no joint CTC scoring anywhere).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class Hypothesis:
    tokens: list  # emitted ids, BOS stripped, EOS not included
    score: float  # sum of chosen per-step log-probabilities (incl. EOS if finished)
    finished: bool = True


def _last_log_probs(decoder, ctx, prefix):
    logits = decoder.decode_logits(ctx, np.asarray(prefix, dtype=np.int64))
    row = logits.data[-1]
    row = row - row.max()
    return row - np.log(np.exp(row).sum())


def greedy_decode(model, inputs, max_len):
    """Pick the argmax token per step (ties to the lowest id) until EOS."""
    dec = model.decoder
    with ad.no_grad():
        ctx = model.context_for(inputs)
        prefix = [dec.bos_id]
        tokens = []
        score = 0.0
        for _ in range(max_len):
            logp = _last_log_probs(dec, ctx, prefix)
            choice = int(logp.argmax())
            score += float(logp[choice])
            if choice == dec.eos_id:
                return Hypothesis(tokens=tokens, score=score, finished=True)
            tokens.append(choice)
            prefix.append(choice)
    return Hypothesis(tokens=tokens, score=score, finished=False)


def beam_decode(model, inputs, width, max_len, length_penalty=0.0):
    """Beam search over decoder log-probs; best hypothesis by
    length-normalized score (raw score at penalty 0).

    The greedy path is always scored as a candidate too, so the result
    never ranks below the greedy hypothesis.
    """
    dec = model.decoder

    def norm(h):
        return h.score / (max(1, len(h.tokens)) ** length_penalty)

    with ad.no_grad():
        ctx = model.context_for(inputs)
        live = [([], 0.0)]
        finished = []
        for _ in range(max_len):
            cands = []
            for toks, sc in live:
                logp = _last_log_probs(dec, ctx, [dec.bos_id] + toks)
                for v in range(dec.vocab_size):
                    cands.append((sc + float(logp[v]), v, toks))
            cands.sort(key=lambda c: (-c[0], c[1]))
            live = []
            for sc, v, toks in cands[:width]:
                if v == dec.eos_id:
                    finished.append(Hypothesis(tokens=toks, score=sc, finished=True))
                else:
                    live.append((toks + [v], sc))
            if not live:
                break
        candidates = finished + [Hypothesis(tokens=t, score=s, finished=False) for t, s in live]
    best = max(candidates, key=norm)
    greedy = greedy_decode(model, inputs, max_len)
    return greedy if norm(greedy) > norm(best) else best


def score_tokens(model, inputs, tokens, include_eos=True):
    """Teacher-forced log-probability of an emitted token sequence."""
    dec = model.decoder
    with ad.no_grad():
        ctx = model.context_for(inputs)
        y_in = np.array([dec.bos_id] + list(tokens), dtype=np.int64)
        logits = dec.decode_logits(ctx, y_in)
        logp = ad.log_softmax_lastdim(logits).data
    y_out = list(tokens) + ([dec.eos_id] if include_eos else [])
    return float(sum(logp[j, y] for j, y in enumerate(y_out)))


# ---------------------------------------------------------------------------
# word error rate
# ---------------------------------------------------------------------------

def word_edit_counts(hyp_text, ref_text):
    """(edit operations, reference length) over whitespace-split words."""
    hyp = hyp_text.split()
    ref = ref_text.split()
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[len(hyp)], len(ref)


def wer(hyp_text, ref_text):
    """Word-level edit distance over reference length.

    Empty reference: 0 against an empty hypothesis, |hyp| / 1 otherwise
    (the denominator floors at one word).
    """
    errors, ref_len = word_edit_counts(hyp_text, ref_text)
    return errors / max(1, ref_len)


def corpus_wer(hyp_texts, ref_texts):
    """Corpus-level rate: total edits over total reference words."""
    total_err = 0
    total_ref = 0
    for h, r in zip(hyp_texts, ref_texts):
        e, n = word_edit_counts(h, r)
        total_err += e
        total_ref += n
    return total_err / max(1, total_ref)


def evaluate_corpus(model, utts, tokenizer, input_fn, max_len=64, beam_width=None):
    """Decode every utterance; returns (report rows, corpus WER).

    Rows are (id, ref, hyp, errors, ref_len); the report file appends a
    final ``corpus_wer,<rate>`` summary line.
    """
    rows = []
    total_err = 0
    total_ref = 0
    for utt in utts:
        inputs = input_fn(utt)
        if beam_width and beam_width > 1:
            hyp = beam_decode(model, inputs, beam_width, max_len)
        else:
            hyp = greedy_decode(model, inputs, max_len)
        hyp_text = tokenizer.detokenize(hyp.tokens)
        errors, ref_len = word_edit_counts(hyp_text, utt.text)
        rows.append((utt.id, utt.text, hyp_text, errors, ref_len))
        total_err += errors
        total_ref += ref_len
    return rows, total_err / max(1, total_ref)


def write_report(path, rows, rate):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["id,ref,hyp,errors,ref_len"]
    lines += [f"{i},{r},{h},{e},{n}" for i, r, h, e, n in rows]
    lines.append(f"corpus_wer,{rate!r}")
    path.write_text("\n".join(lines) + "\n")
