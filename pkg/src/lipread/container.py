"""Binary named-tensor container: checkpoints, codebooks, corpus features.

Layout (little-endian): magic "LRLC1", u32 format version, u8 flags (bit0 =
residual), length-prefixed config hash and mode tag, u32 tensor count, then
per tensor a length-prefixed name, u8 rank, u32 dims and raw float32 data.
Tensor order is preserved, so save -> load -> save is byte-identical;
float32 truncation is the only lossy step.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .synth import Utterance

MAGIC = b"LRLC1"
FORMAT_VERSION = 1


class TensorContainer:
    def __init__(self, config_hash="", mode="", residual=False):
        self.config_hash = config_hash
        self.mode = mode
        self.residual = bool(residual)
        self.tensors = {}

    def put(self, name, array):
        if name in self.tensors:
            raise ConfigError(f"duplicate tensor name {name!r}")
        # note: ascontiguousarray would promote rank-0 to rank-1
        self.tensors[name] = np.asarray(array, dtype="<f4", order="C")

    def get(self, name):
        if name not in self.tensors:
            raise ConfigError(f"missing tensor {name!r}")
        return self.tensors[name]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<B", int(self.residual))]
        for text in (self.config_hash, self.mode):
            raw = text.encode()
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
        chunks.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            raw = name.encode()
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            chunks.append(arr.tobytes())
        path.write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise ConfigError(f"truncated container {path}")
            out = view[pos : pos + n]
            pos += n
            return out

        if bytes(take(5)) != MAGIC:
            raise ConfigError(f"{path} is not a tensor container (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported container version {version}")
        (flags,) = struct.unpack("<B", take(1))
        texts = []
        for _ in range(2):
            (n,) = struct.unpack("<H", take(2))
            texts.append(bytes(take(n)).decode())
        out = cls(config_hash=texts[0], mode=texts[1], residual=bool(flags & 1))
        (count,) = struct.unpack("<I", take(4))
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2))
            name = bytes(take(n)).decode()
            (rank,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
            out.tensors[name] = arr
        if pos != len(data):
            raise ConfigError(f"trailing bytes in container {path}")
        return out


# ---------------------------------------------------------------------------
# model parameter checkpoints
# ---------------------------------------------------------------------------

def save_params(path, params, config_hash, mode="", residual=False):
    box = TensorContainer(config_hash=config_hash, mode=mode, residual=residual)
    for name, p in params.items():
        box.put(name, p.data)
    box.save(path)
    return box


def load_params_into(path, params, expected_hash=None):
    """Load a checkpoint into an existing name->Tensor mapping.

    Names and shapes must match exactly; a hash mismatch (when
    ``expected_hash`` is given) is a configuration error.
    """
    box = TensorContainer.load(path)
    if expected_hash is not None and box.config_hash != expected_hash:
        raise ConfigError(
            f"checkpoint config hash {box.config_hash[:12]}... does not match "
            f"expected {expected_hash[:12]}... for {path}"
        )
    missing = set(params) - set(box.tensors)
    extra = set(box.tensors) - set(params)
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, p in params.items():
        arr = box.tensors[name]
        if arr.shape != p.data.shape:
            raise ConfigError(f"tensor {name!r} shape {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(np.float64)
    return box


# ---------------------------------------------------------------------------
# corpus persistence: manifest + feature container
# ---------------------------------------------------------------------------

def save_corpus(out_dir, split, utts):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    box = TensorContainer(mode=f"corpus/{split}")
    for u in utts:
        lines.append(json.dumps({
            "id": u.id, "lang": u.lang, "text": u.text,
            "T": int(u.video_feats.shape[0]), "T_a": int(u.audio_feats.shape[0]),
        }, sort_keys=True))
        box.put(f"feat/{u.id}/audio", u.audio_feats)
        box.put(f"feat/{u.id}/video", u.video_feats)
        box.put(f"feat/{u.id}/phonemes", u.phoneme_labels.astype(np.float64))
    (out_dir / f"{split}.manifest.jsonl").write_text("\n".join(lines) + "\n")
    box.save(out_dir / f"{split}.feats.lrlc")


def load_corpus(out_dir, split):
    out_dir = Path(out_dir)
    manifest = out_dir / f"{split}.manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"no corpus split {split!r} under {out_dir}")
    box = TensorContainer.load(out_dir / f"{split}.feats.lrlc")
    utts = []
    for line in manifest.read_text().splitlines():
        rec = json.loads(line)
        utts.append(Utterance(
            id=rec["id"], lang=rec["lang"], text=rec["text"],
            audio_feats=box.get(f"feat/{rec['id']}/audio").astype(np.float64),
            video_feats=box.get(f"feat/{rec['id']}/video").astype(np.float64),
            phoneme_labels=box.get(f"feat/{rec['id']}/phonemes").astype(np.int64),
        ))
    return utts
