"""Memory-augmented decoding of speech units into text.

A trainable bank of per-unit feature rows turns a discrete unit sequence
into feature rows by exact row lookup; a context encoder plus causal decoder
turn those into text, trained with a hybrid CTC/attention loss. Two sibling
input layers support the baselines: a plain embedding over units (identical
math, no bank semantics) and a linear front-end over continuous audio
features.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .errors import DataError, ShapeError, VocabularyError
from .training import MetricsWriter, run_training, sample_batch
from .units import quantize

INPUT_KINDS = ("memory", "embed", "audio-linear")


def init_memory_bank(n_units, dim, rng):
    """Bank rows ~ N(0, 1/sqrt(d)) std, one row per speech unit."""
    return ad.tensor(rng.normal(0.0, dim ** -0.5, size=(n_units, dim)), requires_grad=True)


def memory_lookup(units_seq, bank):
    """Exact row gather: f_a[t] = B[x_a[t]] bit-for-bit.

    Gradients w.r.t. the bank accumulate once per unit occurrence; rows of
    units that never occur receive an exactly-zero gradient.
    """
    units_seq = np.asarray(units_seq, dtype=np.int64)
    return ad.embed_gather(bank, units_seq)


class MemoryDecoderModel:
    """Input layer (bank / plain embedding / linear audio front) + decoder."""

    def __init__(self, decoder: tf.DecoderModel, kind="memory", n_units=None, audio_dim=None,
                 ctc_weight=0.3, seed=0):
        if kind not in INPUT_KINDS:
            raise ShapeError(f"unknown input kind {kind!r}")
        if not (0.0 <= ctc_weight <= 1.0):
            raise ShapeError(f"ctc_weight {ctc_weight} outside [0, 1]")
        self.decoder = decoder
        self.kind = kind
        self.ctc_weight = ctc_weight
        self.params = {f"lmdec/{k}": v for k, v in decoder.params.items()}
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6C6D])
        dim = decoder.ctx_cfg.dim
        if kind == "memory":
            if n_units is None:
                raise ShapeError("memory kind needs n_units")
            self.n_units = n_units
            self.params["lmdec/memory/B"] = init_memory_bank(n_units, dim, rng)
        elif kind == "embed":
            if n_units is None:
                raise ShapeError("embed kind needs n_units")
            self.n_units = n_units
            self.params["lmdec/embed/E"] = init_memory_bank(n_units, dim, rng)
        else:
            if audio_dim is None:
                raise ShapeError("audio-linear kind needs audio_dim")
            self.audio_dim = audio_dim
            tf.init_linear(self.params, "lmdec/front", audio_dim, dim, rng)

    @property
    def bank(self):
        return self.params.get("lmdec/memory/B")

    def input_features(self, x):
        """Units (memory/embed kinds) or (T, audio_dim) features -> (T, dim)."""
        if self.kind == "memory":
            return memory_lookup(x, self.params["lmdec/memory/B"])
        if self.kind == "embed":
            return memory_lookup(x, self.params["lmdec/embed/E"])
        feats = x if isinstance(x, ad.Tensor) else ad.tensor(np.asarray(x, dtype=np.float64))
        if feats.shape[-1] != self.audio_dim:
            raise ShapeError(f"audio features dim {feats.shape[-1]} vs front-end {self.audio_dim}")
        return tf.linear(self.params, "lmdec/front", feats)

    def context_for(self, x, train_rng=None):
        return self.decoder.encode_ctx(self.input_features(x), train_rng=train_rng)

    def loss(self, x, y_tokens, train_rng=None):
        return lmdecoder_loss(self, x, y_tokens, train_rng=train_rng)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def ctc_min_frames(target):
    """Shortest frame count that can emit ``target`` under CTC."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_forward(log_probs, target, blank):
    """-log P(target | log_probs) by the forward algorithm, in log space.

    ``log_probs`` is a (T, V+1) tensor of per-frame log distributions with
    the blank at index ``blank`` (the last column). Differentiable: the
    backward rule uses the forward/backward lattice sums.
    """
    lp_t = log_probs if isinstance(log_probs, ad.Tensor) else ad.tensor(log_probs)
    lp = lp_t.data
    if lp.ndim != 2:
        raise ShapeError(f"ctc_forward: log_probs must be 2-D, got {lp.shape}")
    t_frames, n_sym = lp.shape
    if blank != n_sym - 1:
        raise ShapeError(f"ctc_forward: blank must be the last index {n_sym - 1}, got {blank}")
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= blank):
        raise VocabularyError("ctc_forward: target symbols must lie below the blank id")
    if t_frames < max(1, ctc_min_frames(target)):
        raise DataError(
            f"ctc_forward: {t_frames} frames cannot emit a target needing {ctc_min_frames(target)}"
        )

    length = len(target)
    s_len = 2 * length + 1
    lab = np.full(s_len, blank, dtype=np.int64)
    lab[1::2] = target
    allow_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        allow_skip[2:] = (lab[2:] != blank) & (lab[2:] != lab[:-2])

    ninf = -np.inf
    loga = np.full((t_frames, s_len), ninf)
    loga[0, 0] = lp[0, blank]
    if s_len > 1:
        loga[0, 1] = lp[0, lab[1]]
    for t in range(1, t_frames):
        prev = loga[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s_len > 2:
            acc[2:] = np.where(allow_skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        loga[t] = acc + lp[t, lab]
    logp_total = loga[-1, -1] if s_len == 1 else np.logaddexp(loga[-1, -1], loga[-1, -2])
    if not np.isfinite(logp_total):
        raise DataError("ctc_forward: target has zero probability mass")

    def backward(g):
        # beta excludes the emission at t, so alpha+beta sums to logP at every t
        logb = np.full((t_frames, s_len), ninf)
        logb[-1, -1] = 0.0
        if s_len > 1:
            logb[-1, -2] = 0.0
        for t in range(t_frames - 2, -1, -1):
            nxt = logb[t + 1] + lp[t + 1, lab]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            if s_len > 2:
                acc[:-2] = np.where(allow_skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            logb[t] = acc
        occ = np.exp(loga + logb - logp_total)  # posterior state occupancy
        grad = np.zeros_like(lp)
        rows = np.broadcast_to(np.arange(t_frames)[:, None], occ.shape)
        cols = np.broadcast_to(lab[None, :], occ.shape)
        np.add.at(grad, (rows, cols), occ)
        return (-float(g) * grad,)

    return ad.from_op(np.asarray(-logp_total), (lp_t,), backward, "ctc_forward")


# ---------------------------------------------------------------------------
# hybrid loss and pretraining
# ---------------------------------------------------------------------------

def hybrid_loss(decoder: tf.DecoderModel, feats, y_tokens, ctc_weight, train_rng=None):
    """(total, attn, ctc) over one (feature rows, token sequence) pair.

    attn is the teacher-forced NLL summed over tokens+EOS; ctc reads the
    context states through the CTC head; total = (1-w)*attn + w*ctc. ctc is
    a constant 0 when the weight is 0 (and total aliases attn exactly).
    """
    y_tokens = list(int(v) for v in y_tokens)
    if not y_tokens:
        raise DataError("hybrid_loss: empty target")
    ctx = decoder.encode_ctx(feats, train_rng=train_rng)
    y_in = np.array([decoder.bos_id] + y_tokens, dtype=np.int64)
    y_out = np.array(y_tokens + [decoder.eos_id], dtype=np.int64)
    logits = decoder.decode_logits(ctx, y_in, train_rng=train_rng)
    attn = ad.cross_entropy(logits, y_out, reduction="sum")
    if ctc_weight == 0.0:
        return attn, attn, ad.tensor(0.0)
    ctc = ctc_forward(decoder.ctc_log_probs(ctx), y_tokens, blank=decoder.vocab_size - 1)
    total = ad.add(ad.mul(attn, 1.0 - ctc_weight), ad.mul(ctc, ctc_weight))
    return total, attn, ctc


def lmdecoder_loss(model: MemoryDecoderModel, x, y_tokens, train_rng=None):
    feats = model.input_features(x)
    return hybrid_loss(model.decoder, feats, y_tokens, model.ctc_weight, train_rng=train_rng)


def pretrain_lmdecoder(model, train_utts, codebook, tokenizer, settings, heldout_utts=None,
                       max_decode_len=64):
    """Train the decoder stack end to end on audio-text pairs.

    memory/embed kinds consume the quantized audio unit sequence; the
    audio-linear kind consumes the raw audio features. Returns (metrics,
    heldout dict with teacher-forced perplexity and greedy WER).
    """
    if not train_utts:
        raise DataError("pretrain_lmdecoder: empty corpus")
    inputs = [_decoder_input(model, u, codebook) for u in train_utts]
    token_seqs = [tokenizer.tokenize(u.text) for u in train_utts]
    metrics = MetricsWriter(["step", "loss", "ppl"])

    def step_fn(step, rng):
        idxs = sample_batch(rng, len(train_utts), settings.batch_size)
        total = None
        nll = 0.0
        n_tok = 0
        for i in idxs:
            train_rng = np.random.default_rng(int(rng.integers(2**31)))
            t_loss, attn, _ = lmdecoder_loss(model, inputs[int(i)], token_seqs[int(i)], train_rng=train_rng)
            per_tok = ad.mul(t_loss, 1.0 / (len(token_seqs[int(i)]) + 1))
            total = per_tok if total is None else ad.add(total, per_tok)
            nll += float(attn.data)
            n_tok += len(token_seqs[int(i)]) + 1
        total = ad.mul(total, 1.0 / len(idxs))
        return total, (float(np.exp(nll / max(1, n_tok))),)

    run_training(model.params, settings, step_fn, metrics)
    heldout = None
    if heldout_utts:
        heldout = evaluate_lmdecoder(model, heldout_utts, codebook, tokenizer, max_decode_len)
    return metrics, heldout


def evaluate_lmdecoder(model, utts, codebook, tokenizer, max_decode_len=64):
    """Held-out teacher-forced perplexity and greedy word error rate."""
    from .evaluate import corpus_wer, greedy_decode

    nll = 0.0
    n_tok = 0
    pairs = []
    with ad.no_grad():
        for utt in utts:
            x = _decoder_input(model, utt, codebook)
            y = tokenizer.tokenize(utt.text)
            _, attn, _ = lmdecoder_loss(model, x, y)
            nll += float(attn.data)
            n_tok += len(y) + 1
            hyp = greedy_decode(model, x, max_decode_len)
            pairs.append((utt.text, tokenizer.detokenize(hyp.tokens)))
    return {
        "ppl": float(np.exp(nll / max(1, n_tok))),
        "wer": corpus_wer([h for _, h in pairs], [r for r, _ in pairs]),
    }


def _decoder_input(model, utt, codebook):
    if model.kind == "audio-linear":
        return utt.audio_feats
    return quantize(utt.audio_feats, codebook)
