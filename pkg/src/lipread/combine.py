"""Joining the pretrained encoder and decoder stacks for lip reading.

The bridge addresses the memory bank with the visual features: queries from
f_v, keys/values from the bank rows, single-head scaled dot-product (scale
1/sqrt(d)). With a saturated query scale this reduces to the exact row
lookup the decoder was pretrained on. Baseline assembly modes rewire or
reinitialize parts of the pipeline; finetuning runs the same hybrid
CTC/attention loss as decoder pretraining, optionally freezing the encoder
for an initial span of steps.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .errors import ConfigError, DataError, ShapeError
from .masked_pretrain import encoder_inputs
from .memdec import MemoryDecoderModel, hybrid_loss, memory_lookup
from .training import MetricsWriter, run_training, sample_batch

MODES = (
    "proposed",
    "scratch-decoder",
    "asr-pretrain",
    "no-lm",
    "supervised-pretrain",
    "teacher-kl",
)


def init_bridge(params, dim, rng, zero_init=False):
    """Query/key/value matrices ~ N(0, 1/d); zero_init only serves the
    residual-identity configuration."""
    std = dim ** -0.5
    for nm in ("wq", "wk", "wv"):
        w = np.zeros((dim, dim)) if zero_init else rng.normal(0.0, std, size=(dim, dim))
        params[f"bridge/{nm}"] = ad.tensor(w, requires_grad=True)


def memory_attend(f_v, bank, params):
    """Soft memory addressing: f_a[t] = softmax(f_v[t] Wq (B Wk)^T / sqrt(d)) B Wv."""
    f_v = f_v if isinstance(f_v, ad.Tensor) else ad.tensor(f_v)
    bank = bank if isinstance(bank, ad.Tensor) else ad.tensor(bank)
    d = f_v.shape[-1]
    if bank.shape[-1] != d:
        raise ShapeError(f"memory_attend: feature dim {d} vs bank dim {bank.shape[-1]}")
    q = ad.matmul(f_v, params["bridge/wq"])
    k = ad.matmul(bank, params["bridge/wk"])
    v = ad.matmul(bank, params["bridge/wv"])
    weights = ad.softmax_lastdim(ad.mul(ad.matmul(q, ad.transpose(k)), d ** -0.5))
    return ad.matmul(weights, v)


class CombinedModel:
    """Visual encoder + (optional bridge/bank) + context/decoder stack."""

    def __init__(self, encoder, decoder, mode, bank=None, residual=False, ctc_weight=0.3,
                 seed=0, zero_bridge=False):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if encoder.cfg.dim != decoder.ctx_cfg.dim:
            raise ShapeError("encoder and decoder dims differ")
        self.encoder = encoder
        self.decoder = decoder
        self.mode = mode
        self.residual = bool(residual)
        self.ctc_weight = ctc_weight
        self.params = dict(encoder.params)
        self.params.update({f"lmdec/{k}": v for k, v in decoder.params.items()})
        if mode == "proposed":
            if bank is None:
                raise ConfigError("proposed mode needs a memory bank")
            self.params["lmdec/memory/B"] = bank
            init_bridge(self.params, encoder.cfg.dim,
                        np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6272]),
                        zero_init=zero_bridge)
        self.bank = self.params.get("lmdec/memory/B")
        # parameters freshly initialized at assembly (vs. loaded pretrained);
        # finetune may give them a full-rate learning-rate group
        self.fresh_names = {k for k in self.params if k.startswith("bridge/")}

    def visual_features(self, frames, train_rng=None):
        return self.encoder.encode(frames, train_rng=train_rng)

    def context_input(self, f_v, train_rng=None):
        if self.mode != "proposed":
            return f_v
        f_a = memory_attend(f_v, self.bank, self.params)
        return ad.add(f_a, f_v) if self.residual else f_a

    def context_for(self, frames, train_rng=None):
        f_v = self.visual_features(frames, train_rng=train_rng)
        return self.decoder.encode_ctx(self.context_input(f_v, train_rng), train_rng=train_rng)

    def loss(self, frames, y_tokens, train_rng=None):
        f_v = self.visual_features(frames, train_rng=train_rng)
        feats = self.context_input(f_v, train_rng)
        return hybrid_loss(self.decoder, feats, y_tokens, self.ctc_weight, train_rng=train_rng)

    def frames_for(self, utt):
        return encoder_inputs(utt, self.encoder.in_dim, utt.video_feats.shape[1])


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _clone_tensor(t):
    out = ad.tensor(t.data.copy(), requires_grad=True)
    return out


def clone_encoder(enc):
    out = tf.EncoderModel(enc.cfg, enc.in_dim, enc.n_units, np.random.default_rng(0),
                          frontend_window=enc.frontend_window)
    for k, v in enc.params.items():
        out.params[k] = _clone_tensor(v)
    return out


def clone_decoder(dec):
    out = tf.DecoderModel(dec.ctx_cfg, dec.dec_cfg, dec.vocab_size, dec.bos_id, dec.eos_id,
                          np.random.default_rng(0))
    for k, v in dec.params.items():
        out.params[k] = _clone_tensor(v)
    return out


def assemble(mode, encoder=None, lmdecoder=None, combined=None, decoder_builder=None,
             residual=False, ctc_weight=0.3, seed=0, zero_bridge=False):
    """Build a CombinedModel for one baseline mode.

    Pretrained parts are deep-copied so finetuning one assembly never
    mutates another. Mode contracts:

    - proposed: pretrained encoder + memory-kind decoder; fresh bridge.
    - scratch-decoder: pretrained encoder + fresh decoder fed f_v directly.
    - asr-pretrain: pretrained encoder + decoder pretrained on continuous
      audio (its front-end projector is dropped here).
    - no-lm: pretrained encoder + decoder pretrained on units through a
      plain embedding (the embedding is dropped; no bank anywhere).
    - supervised-pretrain: reuse encoder+decoder of a combined model
      trained end-to-end on the high-resource language.
    - teacher-kl: like scratch-decoder; distillation happens in finetune.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "supervised-pretrain":
        if combined is None:
            raise ConfigError("supervised-pretrain needs the supervised combined model")
        return CombinedModel(clone_encoder(combined.encoder), clone_decoder(combined.decoder),
                             mode, residual=False, ctc_weight=ctc_weight, seed=seed)
    if encoder is None:
        raise ConfigError(f"mode {mode!r} needs a pretrained encoder")
    enc = clone_encoder(encoder)
    if mode == "proposed":
        if lmdecoder is None or lmdecoder.kind != "memory":
            raise ConfigError("proposed mode needs a memory-kind pretrained decoder")
        dec = clone_decoder(lmdecoder.decoder)
        bank = _clone_tensor(lmdecoder.bank)
        return CombinedModel(enc, dec, mode, bank=bank, residual=residual,
                             ctc_weight=ctc_weight, seed=seed, zero_bridge=zero_bridge)
    if mode in ("scratch-decoder", "teacher-kl"):
        if lmdecoder is not None:
            raise ConfigError(f"mode {mode!r} trains its decoder from scratch")
        if decoder_builder is None:
            raise ConfigError(f"mode {mode!r} needs a decoder_builder")
        model = CombinedModel(enc, decoder_builder(), mode, residual=False,
                              ctc_weight=ctc_weight, seed=seed)
        model.fresh_names = {k for k in model.params if k.startswith("lmdec/")}
        return model
    if mode == "asr-pretrain":
        if lmdecoder is None or lmdecoder.kind != "audio-linear":
            raise ConfigError("asr-pretrain needs an audio-pretrained decoder")
        return CombinedModel(enc, clone_decoder(lmdecoder.decoder), mode,
                             ctc_weight=ctc_weight, seed=seed)
    if mode == "no-lm":
        if lmdecoder is None or lmdecoder.kind != "embed":
            raise ConfigError("no-lm needs a units/embedding-pretrained decoder")
        return CombinedModel(enc, clone_decoder(lmdecoder.decoder), mode,
                             ctc_weight=ctc_weight, seed=seed)
    raise ConfigError(f"unhandled mode {mode!r}")


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------

def _teacher_kl(student_logits, teacher_logits, teacher_temp=1.0):
    """KL(teacher || student) summed over rows; teacher side is constant."""
    t = teacher_logits / teacher_temp
    t = t - t.max(axis=-1, keepdims=True)
    p = np.exp(t)
    p /= p.sum(axis=-1, keepdims=True)
    entropy_term = float((p * np.log(np.maximum(p, 1e-300))).sum())
    cross = ad.reduce_sum(ad.mul(ad.tensor(p), ad.log_softmax_lastdim(student_logits)))
    return ad.add(ad.mul(cross, -1.0), entropy_term)


def finetune(model: CombinedModel, train_utts, tokenizer, settings, teachers=None,
             kl_weight=0.5, dropout=None, pretrained_lr_scale=1.0):
    """Hybrid CTC/attention finetuning on video-text pairs.

    Encoder parameters stay bit-identical for the first
    ``settings.freeze_steps`` updates (excluded from Adam entirely).
    ``teachers`` is a list of (model, input_fn) pairs; when given, a
    token-level KL to each frozen teacher is added with ``kl_weight``.
    ``dropout`` overrides the blocks' dropout rate for this run (the small
    video-text splits overfit without it). ``pretrained_lr_scale`` slows the
    pretrained parameters relative to the freshly initialized ones
    (discriminative finetuning).
    """
    if not train_utts:
        raise DataError("finetune: empty corpus")
    if dropout is not None:
        import dataclasses

        model.encoder.cfg = dataclasses.replace(model.encoder.cfg, dropout=dropout)
        model.decoder.ctx_cfg = dataclasses.replace(model.decoder.ctx_cfg, dropout=dropout)
        model.decoder.dec_cfg = dataclasses.replace(model.decoder.dec_cfg, dropout=dropout)
    token_seqs = [tokenizer.tokenize(u.text) for u in train_utts]
    frames = [model.frames_for(u) for u in train_utts]
    enc_names = {k for k in model.params if k.startswith("enc/")}
    metrics = MetricsWriter(["step", "loss", "attn", "ctc"])

    def active_names(step):
        if settings.freeze_steps and step < settings.freeze_steps:
            return set(model.params) - enc_names
        return None

    def step_fn(step, rng):
        frozen = bool(settings.freeze_steps and step < settings.freeze_steps)
        for k in enc_names:
            model.params[k].requires_grad = not frozen
        idxs = sample_batch(rng, len(train_utts), settings.batch_size)
        total = None
        attn_sum = ctc_sum = 0.0
        for i in idxs:
            i = int(i)
            train_rng = np.random.default_rng(int(rng.integers(2**31)))
            y = token_seqs[i]
            t_loss, attn, ctc = model.loss(frames[i], y, train_rng=train_rng)
            per_tok = ad.mul(t_loss, 1.0 / (len(y) + 1))
            if teachers:
                with ad.no_grad():
                    t_logits = [
                        teacher.decoder.decode_logits(
                            teacher.context_for(input_fn(train_utts[i])),
                            np.array([teacher.decoder.bos_id] + list(y)),
                        ).data
                        for teacher, input_fn in teachers
                    ]
                f_v = model.visual_features(frames[i], train_rng=train_rng)
                ctx = model.decoder.encode_ctx(model.context_input(f_v, train_rng), train_rng=train_rng)
                s_logits = model.decoder.decode_logits(ctx, np.array([model.decoder.bos_id] + list(y)), train_rng=train_rng)
                kl = None
                for tl in t_logits:
                    term = _teacher_kl(s_logits, tl)
                    kl = term if kl is None else ad.add(kl, term)
                per_tok = ad.add(per_tok, ad.mul(kl, kl_weight / (len(t_logits) * (len(y) + 1))))
            total = per_tok if total is None else ad.add(total, per_tok)
            attn_sum += float(attn.data) / (len(y) + 1)
            ctc_sum += float(ctc.data) / (len(y) + 1)
        total = ad.mul(total, 1.0 / len(idxs))
        return total, (attn_sum / len(idxs), ctc_sum / len(idxs))

    lr_scales = None
    if pretrained_lr_scale != 1.0:
        lr_scales = {k: pretrained_lr_scale for k in model.params if k not in model.fresh_names}
    run_training(model.params, settings, step_fn, metrics, active_names=active_names,
                 lr_scales=lr_scales)
    for k in enc_names:
        model.params[k].requires_grad = True
    return metrics
