"""Synthetic toy languages over a shared phoneme inventory.

A global inventory fixes, per phoneme, an audio emission center, a viseme
class (many phonemes per viseme: the visual signal is ambiguous by
construction) and a spelling symbol. Languages are phoneme subsets plus a
lexicon of phoneme-string words; languages built from the same inventory
share the shared-pool phonemes, so their audio emission distributions
coincide exactly there.

Utterances emit ``frames_per_phoneme`` audio frames around the phoneme
center and video frames around the viseme center (video noisier than
audio), time-aligned across modalities.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, VocabularyError

# one spelling symbol per global phoneme
SYMBOL_POOL = "abcdefghijklmnopqrstuvwxyz0123456789+=@#"

# rng stream tags so inventory / language / corpus draws never collide
_TAG_INVENTORY = 11
_TAG_LANGUAGE = 23
_TAG_CORPUS = 37

DEFAULT_AUDIO_NOISE = 0.1
DEFAULT_VIDEO_NOISE = 0.3


def _stable_hash(text):
    return int.from_bytes(hashlib.blake2s(text.encode()).digest()[:4], "little")


def _spread_centers(rng, n, dim, min_dist=1.0):
    """Uniform [-1, 1]^dim draws rescaled so pairwise distances are >= min_dist."""
    centers = rng.uniform(-1.0, 1.0, size=(n, dim))
    if n < 2:
        return centers
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    smallest = math.sqrt(d2.min())
    if smallest <= 0:
        raise DataError("degenerate center draw (coincident points)")
    if smallest < min_dist:
        centers *= min_dist / smallest
    return centers


@dataclass
class GlobalInventory:
    """Phoneme inventory plus one universal silence "phoneme".

    Row layouts: audio_centers has one row per regular phoneme and a final
    silence row; viseme_centers likewise ends with the silence viseme (a
    closed mouth is its own visual class). Silence is emitted between words
    and is spelled by the space character, so text and phoneme sequences
    align one-to-one.
    """

    seed: int
    audio_centers: np.ndarray  # (P+1, d_a), last row = silence
    viseme_of: np.ndarray  # (P+1,) viseme id per phoneme
    viseme_centers: np.ndarray  # (V+1, d_v), last row = silence viseme
    symbols: str  # one char per regular phoneme

    @property
    def n_phonemes(self):
        return len(self.symbols)

    @property
    def n_visemes(self):
        return self.viseme_centers.shape[0] - 1

    @property
    def silence_id(self):
        return len(self.symbols)

    @property
    def audio_dim(self):
        return self.audio_centers.shape[1]

    @property
    def video_dim(self):
        return self.viseme_centers.shape[1]

    def to_dict(self):
        return {
            "seed": self.seed,
            "audio_centers": self.audio_centers.tolist(),
            "viseme_of": self.viseme_of.tolist(),
            "viseme_centers": self.viseme_centers.tolist(),
            "symbols": self.symbols,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=d["seed"],
            audio_centers=np.asarray(d["audio_centers"], dtype=np.float64),
            viseme_of=np.asarray(d["viseme_of"], dtype=np.int64),
            viseme_centers=np.asarray(d["viseme_centers"], dtype=np.float64),
            symbols=d["symbols"],
        )


def make_inventory(seed, n_phonemes=40, n_visemes=12, audio_dim=16, video_dim=16):
    if n_visemes >= n_phonemes:
        raise ConfigError(f"need fewer visemes ({n_visemes}) than phonemes ({n_phonemes})")
    if n_phonemes > len(SYMBOL_POOL):
        raise ConfigError(f"at most {len(SYMBOL_POOL)} phonemes supported, got {n_phonemes}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, _TAG_INVENTORY])
    audio_centers = _spread_centers(rng, n_phonemes + 1, audio_dim)
    viseme_centers = _spread_centers(rng, n_visemes + 1, video_dim)
    # every viseme used; pigeonhole guarantees shared visemes; silence gets
    # the reserved last viseme
    viseme_of = np.concatenate([
        rng.permutation(np.array([i % n_visemes for i in range(n_phonemes)])),
        [n_visemes],
    ])
    return GlobalInventory(
        seed=int(seed),
        audio_centers=audio_centers,
        viseme_of=viseme_of,
        viseme_centers=viseme_centers,
        symbols=SYMBOL_POOL[:n_phonemes],
    )


@dataclass
class LanguageSpec:
    name: str
    slot: int
    phoneme_ids: np.ndarray  # (P_lang,) indices into the inventory
    lexicon: dict  # word text -> tuple of phoneme ids
    viseme_map: dict  # phoneme id -> viseme id

    @property
    def alphabet(self):
        return "".join(sorted({ch for word in self.lexicon for ch in word}))

    def to_dict(self):
        return {
            "name": self.name,
            "slot": self.slot,
            "phoneme_ids": self.phoneme_ids.tolist(),
            "lexicon": {w: list(p) for w, p in self.lexicon.items()},
            "viseme_map": {str(k): v for k, v in self.viseme_map.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            slot=d["slot"],
            phoneme_ids=np.asarray(d["phoneme_ids"], dtype=np.int64),
            lexicon={w: tuple(p) for w, p in d["lexicon"].items()},
            viseme_map={int(k): v for k, v in d["viseme_map"].items()},
        )


def gen_language(
    inventory: GlobalInventory,
    name,
    share_fraction,
    p_lang=20,
    n_words=60,
    word_len=(2, 6),
    slot=None,
):
    """Build one language: shared-pool phonemes plus a slot-private block.

    The shared pool (size ceil(share_fraction * p_lang)) is fixed by the
    inventory seed, so any two languages overlap exactly there provided
    their slots differ; ``slot`` defaults to a stable hash of the name (the
    returned spec records it so callers can verify distinctness). Lexicon
    words are distinct phoneme strings with distinct viseme strings, which
    keeps the video signal ambiguous per frame but decodable per word.
    """
    if not (0.0 <= share_fraction <= 1.0):
        raise ConfigError(f"share_fraction {share_fraction} outside [0, 1]")
    if p_lang > inventory.n_phonemes:
        raise ConfigError(f"language size {p_lang} exceeds inventory {inventory.n_phonemes}")
    n_shared = math.ceil(share_fraction * p_lang)
    n_private = p_lang - n_shared
    base_rng = np.random.default_rng([inventory.seed & 0xFFFFFFFF, _TAG_LANGUAGE])
    order = base_rng.permutation(inventory.n_phonemes)
    shared = order[:n_shared]
    if n_private > 0:
        pool = order[n_shared:]
        n_slots = len(pool) // n_private
        if n_slots < 1:
            raise DataError(
                f"inventory too small for {n_private} private phonemes per language"
            )
        if slot is None:
            slot = _stable_hash(name) % n_slots
        elif slot >= n_slots:
            raise ConfigError(f"slot {slot} out of range (have {n_slots})")
        private = pool[slot * n_private : (slot + 1) * n_private]
    else:
        slot = 0
        private = np.array([], dtype=order.dtype)
    phoneme_ids = np.sort(np.concatenate([shared, private])).astype(np.int64)

    lex_rng = np.random.default_rng(
        [inventory.seed & 0xFFFFFFFF, _TAG_LANGUAGE, _stable_hash(name), 1]
    )
    lo, hi = word_len
    n_vis = len({int(inventory.viseme_of[p]) for p in phoneme_ids})
    capacity = sum(n_vis ** k for k in range(lo, hi + 1))
    if n_words > capacity:
        raise DataError(
            f"{n_words} words exceed the {capacity} distinct viseme strings available"
        )
    lexicon = {}
    seen_viseme_strings = set()
    attempts = 0
    while len(lexicon) < n_words:
        attempts += 1
        if attempts > 200 * n_words:
            raise DataError(
                f"could not draw {n_words} viseme-distinct words of length {word_len}"
            )
        length = int(lex_rng.integers(lo, hi + 1))
        pids = tuple(int(p) for p in lex_rng.choice(phoneme_ids, size=length))
        vis = tuple(int(inventory.viseme_of[p]) for p in pids)
        if vis in seen_viseme_strings:
            continue
        word = "".join(inventory.symbols[p] for p in pids)
        lexicon[word] = pids
        seen_viseme_strings.add(vis)
    viseme_map = {int(p): int(inventory.viseme_of[p]) for p in phoneme_ids}
    return LanguageSpec(name=name, slot=int(slot), phoneme_ids=phoneme_ids, lexicon=lexicon, viseme_map=viseme_map)


@dataclass
class Utterance:
    id: str
    lang: str
    text: str
    audio_feats: np.ndarray  # (T_a, d_a)
    video_feats: np.ndarray  # (T, d_v)
    phoneme_labels: np.ndarray = field(repr=False, default=None)  # hidden eval aid

    @property
    def n_frames(self):
        return self.video_feats.shape[0]


def gen_corpus(
    lang: LanguageSpec,
    inventory: GlobalInventory,
    n_utts,
    len_range=(2, 4),
    noise_levels=(DEFAULT_AUDIO_NOISE, DEFAULT_VIDEO_NOISE),
    frames_per_phoneme=3,
    seed=0,
    id_prefix=None,
):
    """Sample paired utterances; deterministic per seed, parallel-safe per id.

    Each phoneme emits ``frames_per_phoneme`` frames in both modalities, so
    audio and video stay frame-aligned; words are separated by one silence
    phoneme (spelled by the space character, so text and phoneme sequence
    stay one-to-one). At zero noise the emitted frames equal the centers
    exactly.
    """
    if n_utts < 1:
        raise DataError(f"gen_corpus: n_utts must be >= 1, got {n_utts}")
    audio_noise, video_noise = noise_levels
    words = sorted(lang.lexicon)
    prefix = id_prefix if id_prefix is not None else lang.name
    utts = []
    for i in range(n_utts):
        rng = np.random.default_rng([inventory.seed & 0xFFFFFFFF, _TAG_CORPUS, int(seed) & 0xFFFFFFFF, i])
        n_words = int(rng.integers(len_range[0], len_range[1] + 1))
        chosen = [words[int(k)] for k in rng.integers(0, len(words), size=n_words)]
        pid_seq = []
        for j, w in enumerate(chosen):
            if j:
                pid_seq.append(inventory.silence_id)
            pid_seq.extend(lang.lexicon[w])
        pids = np.array(pid_seq, dtype=np.int64)
        labels = np.repeat(pids, frames_per_phoneme)
        audio = inventory.audio_centers[labels]
        video = inventory.viseme_centers[inventory.viseme_of[labels]]
        if audio_noise > 0:
            audio = audio + audio_noise * rng.normal(size=audio.shape)
        if video_noise > 0:
            video = video + video_noise * rng.normal(size=video.shape)
        utts.append(
            Utterance(
                id=f"{prefix}-{seed}-{i:05d}",
                lang=lang.name,
                text=" ".join(chosen),
                audio_feats=audio,
                video_feats=video,
                phoneme_labels=labels,
            )
        )
    return utts


def multimodal_frames(utt: Utterance, include_audio=True):
    """Frame-aligned [video | audio] rows; audio zero-filled when dropped."""
    audio = utt.audio_feats if include_audio else np.zeros_like(utt.audio_feats)
    return np.concatenate([utt.video_feats, audio], axis=1)


class CharTokenizer:
    """Character tokenizer over a fixed alphabet.

    Id layout: PAD=0, BOS=1, EOS=2, then ' ' and the alphabet (sorted), and
    BLANK as the last index (the CTC head relies on that). tokenize() never
    emits PAD/BOS/EOS/BLANK; detokenize() skips them, so round-trips are
    exact for any text over the alphabet.
    """

    PAD, BOS, EOS = 0, 1, 2

    def __init__(self, alphabet, dictionary_size=None):
        chars = sorted(set(alphabet) - {" "})
        self.id_of = {"<pad>": 0, "<bos>": 1, "<eos>": 2, " ": 3}
        for ch in chars:
            self.id_of[ch] = len(self.id_of)
        self.blank_id = len(self.id_of)
        self.id_of["<blank>"] = self.blank_id
        self.vocab_size = len(self.id_of)
        if dictionary_size is not None and self.vocab_size > dictionary_size:
            raise ConfigError(
                f"alphabet needs {self.vocab_size} entries > dictionary size {dictionary_size}"
            )
        self.char_of = {i: ch for ch, i in self.id_of.items() if len(ch) == 1}

    @classmethod
    def for_inventory(cls, inventory: GlobalInventory, dictionary_size=None):
        return cls(inventory.symbols, dictionary_size=dictionary_size)

    @property
    def pad_id(self):
        return self.PAD

    @property
    def bos_id(self):
        return self.BOS

    @property
    def eos_id(self):
        return self.EOS

    @property
    def space_id(self):
        return self.id_of[" "]

    def tokenize(self, text):
        try:
            return [self.id_of[ch] for ch in text]
        except KeyError as exc:
            raise VocabularyError(f"unknown symbol {exc.args[0]!r}") from None

    def detokenize(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i in (self.PAD, self.BOS, self.EOS, self.blank_id):
                continue
            ch = self.char_of.get(i)
            if ch is None:
                raise VocabularyError(f"unknown token id {i}")
            out.append(ch)
        return "".join(out)
