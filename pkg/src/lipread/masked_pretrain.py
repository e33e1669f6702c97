"""Masked speech-unit prediction: pretraining for the visual encoder.

Contiguous spans are masked by substituting frames copied from a random
offset of the same sequence; the encoder is trained to classify the speech
units of the masked frames only. With multimodal inputs the same spans and
source offsets are applied to both streams (the mask sampler draws depend
only on the seed and T), so the audio stream can never leak the masked
content.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .errors import DataError, ShapeError
from .synth import multimodal_frames
from .training import MetricsWriter, run_training, sample_batch
from .units import quantize

_TAG_MASK = 0x6D61


@dataclass(frozen=True)
class MaskSpec:
    span: int = 5  # contiguous frames per masked span
    fraction: float = 0.3  # fraction of frames inside masked spans
    strategy: str = "substitute-same-sequence"


def mask_sequence(frames, spec: MaskSpec, seed):
    """Mask ``frames`` (T, d) by same-sequence substitution.

    Span starts are drawn uniformly until the masked set reaches
    round(fraction * T) positions; each span is replaced by a cyclic copy
    from a random offset of the original sequence. Returns (masked, M) with
    M boolean over frames. Deterministic per (seed, T).
    """
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    if t < spec.span:
        raise ShapeError(f"mask_sequence: sequence length {t} < span {spec.span}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, _TAG_MASK])
    target = int(round(spec.fraction * t))
    masked = frames.copy()
    m = np.zeros(t, dtype=bool)
    guard = 0
    while m.sum() < target:
        guard += 1
        if guard > 100 * t:
            raise DataError("mask_sequence: sampler failed to reach the target fraction")
        s = int(rng.integers(0, t - spec.span + 1))
        o = int(rng.integers(0, t))
        src = (o + np.arange(spec.span)) % t
        masked[s : s + spec.span] = frames[src]
        m[s : s + spec.span] = True
    return masked, m


def gsk_loss(unit_logits, targets, mask):
    """Masked-prediction loss: -sum over masked t of log softmax(logits_t)[z_t].

    Unmasked rows are never touched by the graph, so their gradient is
    exactly zero. An all-zero mask yields a constant 0 loss with a warning.
    """
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    if not (unit_logits.shape[0] == targets.shape[0] == mask.shape[0]):
        raise ShapeError(
            f"gsk_loss: lengths differ (logits {unit_logits.shape[0]}, targets {targets.shape[0]}, mask {mask.shape[0]})"
        )
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        warnings.warn("gsk_loss: mask selects no frames; loss is 0", RuntimeWarning)
        return ad.tensor(0.0)
    rows = ad.embed_gather(unit_logits, idx)
    return ad.cross_entropy(rows, targets[idx], reduction="sum")


def build_encoder(cfg, video_dim, audio_dim, n_units, seed, multimodal=True, frontend_window=1):
    # +1: the mask-indicator channel (synthetic frames are iid, so substituted
    # spans are otherwise undetectable and the cloze task would be ill-posed;
    # real video reveals substitutions through temporal discontinuity)
    in_dim = (video_dim + audio_dim if multimodal else video_dim) + 1
    return tf.EncoderModel(cfg, in_dim, n_units, np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x656E]),
                           frontend_window=frontend_window)


def _masked_multimodal(utt, spec, seed, drop_audio):
    video_m, m = mask_sequence(utt.video_feats, spec, seed)
    if drop_audio:
        audio_m = np.zeros_like(utt.audio_feats)
    else:
        audio_m, m2 = mask_sequence(utt.audio_feats, spec, seed)
        assert np.array_equal(m, m2)
    return np.concatenate([video_m, audio_m, m[:, None].astype(np.float64)], axis=1), m


def pretrain_encoder(
    model,
    train_utts,
    codebook,
    spec: MaskSpec,
    settings,
    heldout_utts=None,
    modality_dropout=0.5,
    unmasked_weight=1.0,
    targets=None,
):
    """Masked unit-prediction training; returns (metrics, heldout accuracy).

    Unit targets default to quantizing each utterance's audio stream with
    ``codebook``; refined-unit rounds pass explicit per-utterance ``targets``
    instead. The optimized objective adds a weighted unit-prediction term
    over the unmasked frames (it bootstraps the frame-to-unit mapping that
    masked inference relies on); the logged accuracy tracks masked frames.
    """
    if not train_utts:
        raise DataError("pretrain_encoder: empty corpus")
    if targets is None:
        targets = [quantize(u.audio_feats, codebook) for u in train_utts]
    metrics = MetricsWriter(["step", "loss", "masked_acc"])

    def step_fn(step, rng):
        idxs = sample_batch(rng, len(train_utts), settings.batch_size)
        total = None
        hits = 0
        count = 0
        for i in idxs:
            utt = train_utts[int(i)]
            drop_audio = bool(rng.random() < modality_dropout)
            frames, m = _masked_multimodal(utt, spec, int(rng.integers(2**31)), drop_audio)
            train_rng = np.random.default_rng(int(rng.integers(2**31)))
            logits = model.unit_logits(model.encode(frames, train_rng=train_rng))
            loss = ad.mul(gsk_loss(logits, targets[int(i)], m), 1.0 / max(1, int(m.sum())))
            if unmasked_weight > 0.0 and (~m).any():
                aux = ad.mul(gsk_loss(logits, targets[int(i)], ~m), unmasked_weight / int((~m).sum()))
                loss = ad.add(loss, aux)
            total = loss if total is None else ad.add(total, loss)
            pred = logits.data[m].argmax(axis=1)
            hits += int((pred == targets[int(i)][m]).sum())
            count += int(m.sum())
        total = ad.mul(total, 1.0 / len(idxs))
        return total, (hits / max(1, count),)

    run_training(model.params, settings, step_fn, metrics)
    heldout_acc = None
    if heldout_utts:
        heldout_acc = masked_unit_accuracy(model, heldout_utts, codebook, spec, seed=settings.seed)
    return metrics, heldout_acc


def masked_unit_accuracy(model, utts, codebook, spec: MaskSpec, seed=0):
    """Fraction of masked frames whose predicted unit matches the target."""
    hits = 0
    count = 0
    with ad.no_grad():
        for k, utt in enumerate(utts):
            frames, m = _masked_multimodal(utt, spec, seed + 7919 * k, drop_audio=False)
            logits = model.unit_logits(model.encode(frames))
            z = quantize(utt.audio_feats, codebook)
            hits += int((logits.data[m].argmax(axis=1) == z[m]).sum())
            count += int(m.sum())
    if count == 0:
        raise DataError("masked_unit_accuracy: no masked frames")
    return hits / count


def encoder_inputs(utt, in_dim, video_dim):
    """Inference-time encoder inputs: video, zero-filled audio (when the
    front-end is multimodal) and a zero mask-indicator channel."""
    t = utt.video_feats.shape[0]
    flag = np.zeros((t, 1))
    if in_dim == video_dim + 1:
        return np.concatenate([utt.video_feats, flag], axis=1)
    return np.concatenate([multimodal_frames(utt, include_audio=False), flag], axis=1)


def refine_inputs(utt):
    """Unmasked pretraining-style inputs (both modalities, zero flag); the
    codebook refinement pass encodes the corpus with these."""
    t = utt.video_feats.shape[0]
    return np.concatenate([multimodal_frames(utt), np.zeros((t, 1))], axis=1)
