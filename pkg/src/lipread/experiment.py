"""End-to-end experiment grid: pretrain, assemble every mode, finetune, score.

One call reproduces the comparison tables at desk scale: per training seed
the encoder is pretrained once on the high-resource language and reused by
every mode; decoder variants are pretrained per audio-text split; each
(mode, data-amount) cell is finetuned on the low-resource video-text split
and scored by greedy WER on a held-out split. Sweep rows keep the base mode
name plus an ``@tag`` suffix (e.g. ``proposed@vt-67``).
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import transformer as tf
from .combine import assemble, finetune
from .config import ExperimentSpec, ctx_config, decoder_config, encoder_config, ARCH_PRESETS
from .container import save_corpus
from .errors import DataError
from .evaluate import evaluate_corpus, write_report
from .masked_pretrain import MaskSpec, build_encoder, pretrain_encoder, refine_inputs
from .memdec import MemoryDecoderModel, pretrain_lmdecoder
from .synth import CharTokenizer, Utterance, gen_corpus, gen_language, make_inventory
from .training import TrainSettings
from .units import kmeans_fit, quantize, refine_codebook

from . import autodiff as ad


def quantize_hidden(model, utt, codebook):
    """Refined-unit targets: quantize the encoder's hidden features."""
    with ad.no_grad():
        hidden = model.encode(refine_inputs(utt)).data
    return quantize(hidden, codebook)

FRAME_SECONDS = 0.04  # 25 fps equivalent for the hours columns
REPORT_HEADER = "mode,seed,wer,steps,at_hours_equiv,vt_hours_equiv"


def hours_equiv(utts):
    return sum(u.n_frames for u in utts) * FRAME_SECONDS / 3600.0


@dataclass
class PipelineData:
    inventory: object
    lang_high: object
    lang_low: object
    tokenizer: object
    codebook: object
    corpora: dict  # name -> list[Utterance]


def build_data(spec: ExperimentSpec, with_high_videotext=False):
    """Generate inventory, the two languages, all corpus splits, codebook."""
    inv = make_inventory(spec.gen_seed)
    hi = gen_language(inv, spec.lang_high, spec.share_fraction, slot=0)
    lo = gen_language(inv, spec.lang_low, spec.share_fraction, slot=1)
    corpora = {
        "pretrain_high": gen_corpus(hi, inv, spec.pretrain_utts, seed=101),
        "audiotext_low": gen_corpus(lo, inv, spec.audio_text_utts, seed=202) if spec.audio_text_utts else [],
        "videotext_low": gen_corpus(lo, inv, spec.video_text_utts, seed=303),
        "heldout_low": gen_corpus(lo, inv, spec.eval_utts, seed=404),
        "heldout_high": gen_corpus(hi, inv, max(8, spec.eval_utts // 2), seed=505),
    }
    if with_high_videotext:
        corpora["videotext_high"] = gen_corpus(hi, inv, spec.video_text_utts, seed=606)
    arch = ARCH_PRESETS[spec.preset]
    codebook = fit_shared_codebook(
        corpora["pretrain_high"] + corpora["audiotext_low"], arch["codebook_size"], seed=spec.gen_seed,
    )
    return PipelineData(
        inventory=inv, lang_high=hi, lang_low=lo,
        tokenizer=CharTokenizer.for_inventory(inv, dictionary_size=arch["dictionary_size"]),
        codebook=codebook, corpora=corpora,
    )


def fit_shared_codebook(utts, n_clusters, seed, max_frames=20000):
    """K-means over pooled audio frames of the available corpora (the unit
    inventory is language-agnostic, so both languages contribute)."""
    frames = np.concatenate([u.audio_feats for u in utts], axis=0)
    if frames.shape[0] > max_frames:
        idx = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6662]).choice(
            frames.shape[0], size=max_frames, replace=False)
        frames = frames[np.sort(idx)]
    return kmeans_fit(frames, n_clusters, seed=seed)


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def new_encoder(spec, data, seed):
    arch = ARCH_PRESETS[spec.preset]
    return build_encoder(
        encoder_config(arch), data.inventory.video_dim, data.inventory.audio_dim,
        data.codebook.n_units, seed, multimodal=True,
        frontend_window=arch["frontend_window"],
    )


def new_decoder(spec, data, seed):
    arch = ARCH_PRESETS[spec.preset]
    tok = data.tokenizer
    return tf.DecoderModel(
        ctx_config(arch), decoder_config(arch), tok.vocab_size, tok.bos_id, tok.eos_id,
        rng=np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6463]),
    )


def new_lmdecoder(spec, data, seed, kind="memory"):
    return MemoryDecoderModel(
        new_decoder(spec, data, seed), kind=kind,
        n_units=data.codebook.n_units if kind != "audio-linear" else None,
        audio_dim=data.inventory.audio_dim if kind == "audio-linear" else None,
        ctc_weight=spec.ctc_weight, seed=seed,
    )


def _settings(spec, steps, seed, freeze_steps=0, warmup=0.25, decay=0.75):
    return TrainSettings(
        steps=steps, batch_size=spec.batch_size, peak_lr=spec.peak_lr,
        warmup=warmup, hold=0.0, decay=decay, freeze_steps=freeze_steps, seed=seed,
    )


# ---------------------------------------------------------------------------
# the grid
# ---------------------------------------------------------------------------

class ExperimentRunner:
    def __init__(self, spec: ExperimentSpec, out_dir, data=None, log=print):
        self.spec = spec
        self.out = Path(out_dir)
        self.log = log or (lambda *_: None)
        needs_high_vt = "supervised-pretrain" in spec.modes
        self.data = data if data is not None else build_data(spec, with_high_videotext=needs_high_vt)
        self._audio_sets = None
        self._enc_cache = {}
        self._lmdec_cache = {}
        self._sup_cache = {}
        self.rows = []

    # ---- stage caches (per seed) ------------------------------------------
    def audio_text_sets(self):
        if self._audio_sets is None:
            c = self.data.corpora
            self._audio_sets = {
                "large": c["audiotext_low"],
                "small": c["videotext_low"],  # the audio side of the video corpus
                "both": c["audiotext_low"] + c["videotext_low"],
                "tiny": c["audiotext_low"][: self.spec.at_tiny_utts],
            }
        return self._audio_sets

    def pretrained_encoder(self, seed):
        cache = self._enc_cache
        key = seed
        if key not in cache:
            spec = self.spec
            utts = self.data.corpora["pretrain_high"]
            mask = MaskSpec(span=spec.mask_span, fraction=spec.mask_fraction)
            model = new_encoder(spec, self.data, seed=seed * 100 + 11)
            rounds = max(1, spec.refine_iterations)
            per_round = [spec.pretrain_steps // rounds] * rounds
            per_round[-1] += spec.pretrain_steps - sum(per_round)
            targets = None  # round 0: audio-codebook units
            for k, steps in enumerate(per_round):
                self.log(f"[seed {seed}] encoder round {k + 1}/{rounds} ({steps} steps)")
                settings = _settings(spec, steps, seed=seed * 100 + 12 + k)
                metrics, acc = pretrain_encoder(
                    model, utts, self.data.codebook, mask, settings,
                    heldout_utts=self.data.corpora["heldout_high"] if targets is None else None,
                    targets=targets,
                )
                tag = f"encoder-s{seed}" if rounds == 1 else f"encoder-r{k}-s{seed}"
                self._write_cell(tag, metrics, {"heldout_masked_acc": acc} if acc is not None else None)
                if k + 1 < rounds:
                    refined = refine_codebook(model, utts, self.data.codebook.n_units,
                                              seed=seed * 100 + 71 + k)
                    targets = [quantize_hidden(model, u, refined) for u in utts]
            cache[key] = model
        return cache[key]

    def pretrained_lmdecoder(self, seed, at_variant, kind="memory"):
        cache = self._lmdec_cache
        key = (seed, at_variant, kind)
        if key not in cache:
            utts = self.audio_text_sets()[at_variant]
            self.log(f"[seed {seed}] pretraining {kind} decoder on at-{at_variant} ({len(utts)} utts)")
            model = new_lmdecoder(self.spec, self.data, seed=seed * 100 + 21, kind=kind)
            settings = _settings(self.spec, self.spec.lmdec_steps, seed=seed * 100 + 22)
            metrics, heldout = pretrain_lmdecoder(
                model, utts, self.data.codebook, self.data.tokenizer, settings,
                heldout_utts=self.data.corpora["heldout_low"][:16],
                max_decode_len=self.spec.max_decode_len,
            )
            self._write_cell(f"lmdec-{kind}-{at_variant}-s{seed}", metrics, heldout)
            cache[key] = model
        return cache[key]

    def supervised_high_model(self, seed):
        cache = self._sup_cache
        key = seed
        if key not in cache:
            self.log(f"[seed {seed}] supervised pretraining on high-resource video-text")
            model = assemble(
                "scratch-decoder", encoder=new_encoder(self.spec, self.data, seed=seed * 100 + 31),
                decoder_builder=lambda: new_decoder(self.spec, self.data, seed=seed * 100 + 32),
                ctc_weight=self.spec.ctc_weight, seed=seed * 100 + 33,
            )
            settings = _settings(self.spec, self.spec.pretrain_steps + self.spec.finetune_steps,
                                 seed=seed * 100 + 34)
            metrics = finetune(model, self.data.corpora["videotext_high"], self.data.tokenizer, settings)
            self._write_cell(f"supervised-high-s{seed}", metrics, None)
            cache[key] = model
        return cache[key]

    # ---- cells -------------------------------------------------------------
    def assemble_for(self, mode, seed, at_variant="large"):
        spec = self.spec
        if mode == "proposed" and not self.audio_text_sets()[at_variant]:
            return None  # degenerate: no audio-text at all
        encoder = self.pretrained_encoder(seed) if mode != "supervised-pretrain" else None
        if mode == "proposed":
            return assemble(mode, encoder=encoder,
                            lmdecoder=self.pretrained_lmdecoder(seed, at_variant, "memory"),
                            ctc_weight=spec.ctc_weight, seed=seed * 100 + 41)
        if mode == "asr-pretrain":
            return assemble(mode, encoder=encoder,
                            lmdecoder=self.pretrained_lmdecoder(seed, at_variant, "audio-linear"),
                            ctc_weight=spec.ctc_weight, seed=seed * 100 + 42)
        if mode == "no-lm":
            return assemble(mode, encoder=encoder,
                            lmdecoder=self.pretrained_lmdecoder(seed, at_variant, "embed"),
                            ctc_weight=spec.ctc_weight, seed=seed * 100 + 43)
        if mode in ("scratch-decoder", "teacher-kl"):
            return assemble(mode, encoder=encoder,
                            decoder_builder=lambda: new_decoder(self.spec, self.data, seed=seed * 100 + 44),
                            ctc_weight=spec.ctc_weight, seed=seed * 100 + 45)
        if mode == "supervised-pretrain":
            return assemble(mode, combined=self.supervised_high_model(seed),
                            ctc_weight=spec.ctc_weight, seed=seed * 100 + 46)
        raise DataError(f"unknown mode {mode}")

    def run_cell(self, label, mode, seed, at_variant="large", vt_fraction=1.0):
        spec = self.spec
        vt_all = self.data.corpora["videotext_low"]
        vt = vt_all[: max(1, round(vt_fraction * len(vt_all)))]
        model = self.assemble_for(mode, seed, at_variant)
        if model is None:
            label = "scratch-decoder[degenerate-proposed:no-audio-text]"
            model = self.assemble_for("scratch-decoder", seed)
            mode_used = "scratch-decoder"
        else:
            mode_used = mode
        self.log(f"[seed {seed}] finetuning {label} on {len(vt)} video-text utts")
        freeze = round(spec.freeze_fraction * spec.finetune_steps)
        settings = _settings(spec, spec.finetune_steps, seed=seed * 100 + 51,
                             freeze_steps=freeze, warmup=0.2, decay=0.8)
        teachers = self._teachers(seed, vt) if mode_used == "teacher-kl" else None
        metrics = finetune(model, vt, self.data.tokenizer, settings, teachers=teachers)
        rows, rate = evaluate_corpus(
            model, self.data.corpora["heldout_low"], self.data.tokenizer,
            input_fn=model.frames_for, max_len=spec.max_decode_len,
        )
        cell = f"{label}-s{seed}"
        self._write_cell(cell, metrics, None)
        write_report(self.out / "cells" / cell / "eval.csv", rows, rate)
        at_hours = hours_equiv(self.audio_text_sets()[at_variant]) if mode_used in ("proposed", "asr-pretrain", "no-lm") else 0.0
        self.rows.append((label, seed, rate, spec.finetune_steps, at_hours, hours_equiv(vt)))
        return rate

    def _teachers(self, seed, vt):
        # lip teacher: scratch pipeline finetuned on the target video-text;
        # audio teacher: decoder trained on the same utterances' audio
        lip = self.assemble_for("scratch-decoder", seed)
        settings = _settings(self.spec, self.spec.finetune_steps, seed=seed * 100 + 61)
        finetune(lip, vt, self.data.tokenizer, settings)
        audio = new_lmdecoder(self.spec, self.data, seed=seed * 100 + 62, kind="audio-linear")
        pretrain_lmdecoder(audio, vt, self.data.codebook, self.data.tokenizer,
                           _settings(self.spec, self.spec.lmdec_steps, seed=seed * 100 + 63))
        return [(lip, lip.frames_for), (audio, lambda u: u.audio_feats)]

    # ---- full grid ---------------------------------------------------------
    def run(self):
        spec = self.spec
        for seed in spec.seeds:
            for mode in spec.modes:
                self.run_cell(mode, mode, seed)
            if spec.run_at_ablation and "proposed" in spec.modes:
                self.run_cell("proposed@at-small", "proposed", seed, at_variant="small")
                self.run_cell("proposed@at-both", "proposed", seed, at_variant="both")
                self.run_cell("proposed@at-tiny", "proposed", seed, at_variant="tiny")
            if spec.run_vt_sweep and "proposed" in spec.modes:
                for frac in spec.vt_fractions:
                    if abs(frac - 1.0) < 1e-12:
                        continue  # full-data cell already ran
                    pct = round(frac * 100)
                    self.run_cell(f"proposed@vt-{pct}", "proposed", seed, vt_fraction=frac)
        self.write_reports()
        return self.rows

    # ---- artifacts ---------------------------------------------------------
    def _write_cell(self, name, metrics, extra):
        cell_dir = self.out / "cells" / name
        cell_dir.mkdir(parents=True, exist_ok=True)
        metrics.write(cell_dir / "metrics.csv")
        if extra:
            (cell_dir / "summary.json").write_text(json.dumps(extra, sort_keys=True) + "\n")

    def write_reports(self):
        self.out.mkdir(parents=True, exist_ok=True)
        lines = [REPORT_HEADER]
        for row in sorted(self.rows, key=lambda r: (r[0], r[1])):
            mode, seed, wer, steps, at_h, vt_h = row
            lines.append(f"{mode},{seed},{wer!r},{steps},{at_h!r},{vt_h!r}")
        (self.out / "report.csv").write_text("\n".join(lines) + "\n")
        summary = ["mode,median_wer,n_seeds"]
        for mode in sorted({r[0] for r in self.rows}):
            wers = [r[2] for r in self.rows if r[0] == mode]
            summary.append(f"{mode},{statistics.median(wers)!r},{len(wers)}")
        (self.out / "report_summary.csv").write_text("\n".join(summary) + "\n")
        (self.out / "resolved_config.json").write_text(
            json.dumps(self.spec.to_dict(), indent=2, sort_keys=True) + "\n")


def run_experiment(spec: ExperimentSpec, out_dir, log=print):
    """Execute the full grid; returns the report rows."""
    runner = ExperimentRunner(spec, out_dir, log=log)
    return runner.run()


def median_wer(rows, mode):
    wers = [r[2] for r in rows if r[0] == mode]
    if not wers:
        raise DataError(f"no rows for mode {mode!r}")
    return statistics.median(wers)


def save_data_splits(data: PipelineData, out_dir):
    """Persist the generated corpora in the manifest + container format."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "inventory.json").write_text(json.dumps(data.inventory.to_dict()) + "\n")
    for name, lang in (("lang_high", data.lang_high), ("lang_low", data.lang_low)):
        (out_dir / f"{name}.json").write_text(json.dumps(lang.to_dict()) + "\n")
    for split, utts in data.corpora.items():
        save_corpus(out_dir, split, utts)
