"""Command-line entry points.

Commands: gen, units, pretrain-gsk, pretrain-lmdec, finetune, eval,
experiment. Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import transformer as tf
from .combine import CombinedModel, MODES, assemble, finetune
from .config import (
    ExperimentSpec,
    GenConfig,
    RunConfig,
    ctx_config,
    decoder_config,
    encoder_config,
    model_config_hash,
    write_resolved_config,
)
from .container import TensorContainer, load_corpus, load_params_into, save_corpus, save_params
from .errors import (
    ConfigError,
    DataError,
    LipreadError,
    TrainingDivergedError,
    VocabularyError,
)
from .evaluate import evaluate_corpus, write_report
from .masked_pretrain import MaskSpec, build_encoder, pretrain_encoder
from .memdec import MemoryDecoderModel, pretrain_lmdecoder
from .experiment import run_experiment
from .synth import CharTokenizer, GlobalInventory, LanguageSpec, gen_corpus, gen_language, make_inventory
from .training import TrainSettings
from .units import UnitCodebook, kmeans_fit

MODE_TO_DECODER_KIND = {"proposed": "memory", "no-lm": "embed", "asr-pretrain": "audio-linear"}


def build_parser():
    parser = argparse.ArgumentParser(prog="lipread", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen", "generate synthetic languages and corpora"),
        ("units", "fit the speech-unit codebook"),
        ("pretrain-gsk", "masked unit-prediction pretraining of the encoder"),
        ("pretrain-lmdec", "audio-text pretraining of the decoder stack"),
        ("finetune", "assemble a mode and finetune on video-text"),
        ("eval", "decode a held-out split and report WER"),
        ("experiment", "run the full comparison grid"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--ckpt", action="append", default=[], help="checkpoint path (repeatable)")
        p.add_argument("--mode", default=None, choices=MODES, help="bridge assembly mode")
    return parser


# ---------------------------------------------------------------------------
# shared pipeline plumbing
# ---------------------------------------------------------------------------

def _load_world(data_dir):
    data_dir = Path(data_dir)
    inv_path = data_dir / "inventory.json"
    if not inv_path.exists():
        raise ConfigError(f"no inventory.json under {data_dir}; run `lipread gen` first")
    inv = GlobalInventory.from_dict(json.loads(inv_path.read_text()))
    langs = {}
    for path in sorted(data_dir.glob("lang_*.json")):
        spec = LanguageSpec.from_dict(json.loads(path.read_text()))
        langs[spec.name] = spec
    return inv, langs


def _arch_hash(cfg: RunConfig, inv, tokenizer):
    return model_config_hash(cfg.arch(), tokenizer.vocab_size, inv.video_dim, inv.audio_dim)


def _require_ckpts(args, n, what):
    if len(args.ckpt) < n:
        raise ConfigError(f"{args.command} needs {n} --ckpt argument(s): {what}")


def load_codebook(path):
    box = TensorContainer.load(path)
    return UnitCodebook(centroids=box.get("codebook/centroids").astype(np.float64))


def save_codebook(path, codebook, config_hash=""):
    box = TensorContainer(config_hash=config_hash, mode="codebook")
    box.put("codebook/centroids", codebook.centroids)
    box.save(path)


def build_combined_shell(cfg: RunConfig, inv, tokenizer, mode, residual):
    """A fresh CombinedModel with the right tensor shapes for loading."""
    arch = cfg.arch()
    enc = build_encoder(encoder_config(arch), inv.video_dim, inv.audio_dim,
                        arch["codebook_size"], seed=0, multimodal=True,
                        frontend_window=arch["frontend_window"])
    dec = tf.DecoderModel(ctx_config(arch), decoder_config(arch), tokenizer.vocab_size,
                          tokenizer.bos_id, tokenizer.eos_id, rng=np.random.default_rng(0))
    bank = None
    if mode == "proposed":
        from .memdec import init_memory_bank

        bank = init_memory_bank(arch["codebook_size"], arch["dim"], np.random.default_rng(0))
    return CombinedModel(enc, dec, mode, bank=bank, residual=residual,
                         ctc_weight=cfg.ctc_weight, seed=0)


def _settings(cfg: RunConfig):
    return TrainSettings(
        steps=cfg.steps, batch_size=cfg.batch_size, peak_lr=cfg.peak_lr,
        warmup=cfg.warmup, hold=cfg.hold, decay=cfg.decay, decay_floor=cfg.decay_floor,
        freeze_steps=cfg.freeze_steps, seed=cfg.seed, log_every=cfg.log_every,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    cfg = GenConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    inv = make_inventory(cfg.seed, cfg.n_phonemes, cfg.n_visemes, cfg.audio_dim, cfg.video_dim)
    out.mkdir(parents=True, exist_ok=True)
    (out / "inventory.json").write_text(json.dumps(inv.to_dict()) + "\n")
    langs = {}
    for lang_cfg in cfg.languages:
        lang = gen_language(inv, lang_cfg["name"], cfg.share_fraction, cfg.p_lang,
                            cfg.n_words, tuple(cfg.word_len), slot=lang_cfg.get("slot"))
        langs[lang.name] = lang
        (out / f"lang_{lang.name}.json").write_text(json.dumps(lang.to_dict()) + "\n")
    for sp in cfg.splits:
        if sp["lang"] not in langs:
            raise ConfigError(f"split {sp['name']!r} references unknown language {sp['lang']!r}")
        utts = gen_corpus(langs[sp["lang"]], inv, sp["n_utts"], tuple(cfg.len_range),
                          (cfg.audio_noise, cfg.video_noise), cfg.frames_per_phoneme,
                          seed=sp.get("seed", 0))
        save_corpus(out, sp["name"], utts)
    write_resolved_config(out, cfg.to_dict())
    return 0


def cmd_units(args):
    cfg = _run_config(args)
    inv, _ = _load_world(cfg.data_dir)
    utts = load_corpus(cfg.data_dir, cfg.split)
    frames = np.concatenate([u.audio_feats for u in utts], axis=0)
    codebook = kmeans_fit(frames, cfg.arch()["codebook_size"], seed=cfg.seed)
    out = Path(args.out)
    tokenizer = CharTokenizer.for_inventory(inv)
    save_codebook(out / "codebook.lrlc", codebook, _arch_hash(cfg, inv, tokenizer))
    write_resolved_config(out, cfg.to_dict())
    return 0


def cmd_pretrain_gsk(args):
    cfg = _run_config(args)
    _require_ckpts(args, 1, "the codebook")
    inv, _ = _load_world(cfg.data_dir)
    codebook = load_codebook(args.ckpt[0])
    tokenizer = CharTokenizer.for_inventory(inv)
    train_utts = load_corpus(cfg.data_dir, cfg.split)
    heldout = load_corpus(cfg.data_dir, cfg.heldout_split) if cfg.heldout_split else None
    arch = cfg.arch()
    model = build_encoder(encoder_config(arch), inv.video_dim, inv.audio_dim,
                          codebook.n_units, seed=cfg.seed, multimodal=True,
                          frontend_window=arch["frontend_window"])
    mask = MaskSpec(span=cfg.mask_span, fraction=cfg.mask_fraction)
    metrics, acc = pretrain_encoder(model, train_utts, codebook, mask, _settings(cfg),
                                    heldout_utts=heldout, modality_dropout=cfg.modality_dropout)
    out = Path(args.out)
    metrics.write(out / "metrics.csv")
    save_params(out / "encoder.lrlc", model.params, _arch_hash(cfg, inv, tokenizer), mode="encoder")
    if acc is not None:
        (out / "summary.json").write_text(json.dumps({"heldout_masked_acc": acc}) + "\n")
    write_resolved_config(out, cfg.to_dict())
    return 0


def cmd_pretrain_lmdec(args):
    cfg = _run_config(args)
    _require_ckpts(args, 1, "the codebook")
    mode = args.mode or cfg.mode
    kind = MODE_TO_DECODER_KIND.get(mode)
    if kind is None:
        raise ConfigError(f"mode {mode!r} does not pretrain a decoder on audio-text")
    inv, _ = _load_world(cfg.data_dir)
    codebook = load_codebook(args.ckpt[0])
    tokenizer = CharTokenizer.for_inventory(inv)
    train_utts = load_corpus(cfg.data_dir, cfg.split)
    heldout = load_corpus(cfg.data_dir, cfg.heldout_split) if cfg.heldout_split else None
    arch = cfg.arch()
    decoder = tf.DecoderModel(ctx_config(arch), decoder_config(arch), tokenizer.vocab_size,
                              tokenizer.bos_id, tokenizer.eos_id,
                              rng=np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x6463]))
    model = MemoryDecoderModel(decoder, kind=kind,
                               n_units=codebook.n_units if kind != "audio-linear" else None,
                               audio_dim=inv.audio_dim if kind == "audio-linear" else None,
                               ctc_weight=cfg.ctc_weight, seed=cfg.seed)
    metrics, heldout_stats = pretrain_lmdecoder(model, train_utts, codebook, tokenizer,
                                                _settings(cfg), heldout_utts=heldout,
                                                max_decode_len=cfg.max_decode_len)
    out = Path(args.out)
    metrics.write(out / "metrics.csv")
    save_params(out / f"lmdec-{kind}.lrlc", model.params, _arch_hash(cfg, inv, tokenizer),
                mode=f"lmdec-{kind}")
    if heldout_stats:
        (out / "summary.json").write_text(json.dumps(heldout_stats, sort_keys=True) + "\n")
    write_resolved_config(out, cfg.to_dict())
    return 0


def cmd_finetune(args):
    cfg = _run_config(args)
    mode = args.mode or cfg.mode
    inv, _ = _load_world(cfg.data_dir)
    tokenizer = CharTokenizer.for_inventory(inv)
    arch = cfg.arch()
    expected = _arch_hash(cfg, inv, tokenizer)
    encoder = None
    lmdecoder = None
    if mode != "supervised-pretrain":
        _require_ckpts(args, 1, "the pretrained encoder")
        encoder = build_encoder(encoder_config(arch), inv.video_dim, inv.audio_dim,
                                arch["codebook_size"], seed=0, multimodal=True,
                                frontend_window=arch["frontend_window"])
        load_params_into(args.ckpt[0], encoder.params, expected_hash=expected)
    kind = MODE_TO_DECODER_KIND.get(mode)
    if kind is not None:
        _require_ckpts(args, 2, "encoder and pretrained decoder")
        decoder = tf.DecoderModel(ctx_config(arch), decoder_config(arch), tokenizer.vocab_size,
                                  tokenizer.bos_id, tokenizer.eos_id, rng=np.random.default_rng(0))
        lmdecoder = MemoryDecoderModel(decoder, kind=kind,
                                       n_units=arch["codebook_size"] if kind != "audio-linear" else None,
                                       audio_dim=inv.audio_dim if kind == "audio-linear" else None,
                                       ctc_weight=cfg.ctc_weight, seed=0)
        load_params_into(args.ckpt[1], lmdecoder.params, expected_hash=expected)
    if mode == "supervised-pretrain":
        _require_ckpts(args, 1, "the supervised combined model")
        shell = build_combined_shell(cfg, inv, tokenizer, "scratch-decoder", False)
        load_params_into(args.ckpt[0], shell.params, expected_hash=expected)
        model = assemble(mode, combined=shell, ctc_weight=cfg.ctc_weight, seed=cfg.seed)
    else:
        builder = None
        if mode in ("scratch-decoder", "teacher-kl"):
            builder = lambda: tf.DecoderModel(
                ctx_config(arch), decoder_config(arch), tokenizer.vocab_size,
                tokenizer.bos_id, tokenizer.eos_id,
                rng=np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x6463]))
        model = assemble(mode, encoder=encoder, lmdecoder=lmdecoder, decoder_builder=builder,
                         residual=cfg.residual, ctc_weight=cfg.ctc_weight, seed=cfg.seed)
    train_utts = load_corpus(cfg.data_dir, cfg.split)
    metrics = finetune(model, train_utts, tokenizer, _settings(cfg))
    out = Path(args.out)
    metrics.write(out / "metrics.csv")
    save_params(out / "combined.lrlc", model.params, expected, mode=mode, residual=cfg.residual)
    write_resolved_config(out, cfg.to_dict())
    return 0


def cmd_eval(args):
    cfg = _run_config(args)
    _require_ckpts(args, 1, "the combined model")
    inv, _ = _load_world(cfg.data_dir)
    tokenizer = CharTokenizer.for_inventory(inv)
    expected = _arch_hash(cfg, inv, tokenizer)
    header = TensorContainer.load(args.ckpt[0])
    model = build_combined_shell(cfg, inv, tokenizer, header.mode, header.residual)
    load_params_into(args.ckpt[0], model.params, expected_hash=expected)
    utts = load_corpus(cfg.data_dir, cfg.split)
    rows, rate = evaluate_corpus(model, utts, tokenizer, input_fn=model.frames_for,
                                 max_len=cfg.max_decode_len)
    out = Path(args.out)
    write_report(out / "eval.csv", rows, rate)
    write_resolved_config(out, cfg.to_dict())
    print(f"wer {rate:.4f} over {len(rows)} utterances")
    return 0


def cmd_experiment(args):
    spec = ExperimentSpec.from_file(args.config)
    if args.seed is not None:
        spec.seeds = [args.seed]
    run_experiment(spec, args.out, log=lambda *a: print(*a, file=sys.stderr))
    return 0


def _run_config(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    return cfg


COMMANDS = {
    "gen": cmd_gen,
    "units": cmd_units,
    "pretrain-gsk": cmd_pretrain_gsk,
    "pretrain-lmdec": cmd_pretrain_lmdec,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, VocabularyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except LipreadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
