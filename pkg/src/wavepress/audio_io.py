"""Companding, file formats, and synthetic desk-scale data.

File formats, all little-endian regardless of host:

* WAV: canonical 44-byte RIFF/WAVE header, PCM 16-bit mono.
* WNF1 features: magic ``WNF1``, version u32, frames u32, bands u32,
  then float32 payload, frame-major.
* Checkpoint: one text line ``WNCKPT1 <manifest_bytes>``, a human-readable
  JSON manifest, then raw blobs (tensors float32, masks packed 1 bit per
  weight). Every blob carries a CRC-32 in the manifest.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AudioClip",
    "FeatureMatrix",
    "SILENCE_CODE",
    "mulaw_encode",
    "mulaw_decode",
    "write_wav",
    "read_wav",
    "write_features",
    "read_features",
    "write_checkpoint",
    "read_checkpoint",
    "Checkpoint",
    "CheckpointError",
    "synth_dataset",
    "write_dataset",
    "load_dataset_manifest",
]

HOP = 200


@dataclass
class AudioClip:
    """16 kHz mono audio with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass
class FeatureMatrix:
    """Conditioning frames, [frames, bands], hop of 200 samples per frame."""

    data: np.ndarray
    hop: int = HOP

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError("feature data must be 2-D [frames, bands]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bands(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# mu-law companding, 256 levels, exact zero at the center code

_MU = 255.0
_LOG1P_MU = np.log(256.0)

SILENCE_CODE = 128


def mulaw_encode(x) -> np.ndarray:
    """Map amplitudes in [-1, 1] to codes 0..255 (values outside are clamped).

    Companded value y = sign(x) * ln(1 + 255|x|) / ln(256), then
    code = floor((y + 1) / 2 * 255 + 0.5). Zero maps to code 128.
    """
    a = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    y = np.sign(a) * np.log1p(_MU * np.abs(a)) / _LOG1P_MU
    code = np.floor((y + 1.0) * 127.5 + 0.5)
    out = np.clip(code, 0, 255).astype(np.int64)
    return out if out.ndim else np.int64(out)


def mulaw_decode(code) -> np.ndarray:
    """Inverse companding of the code's bin center.

    Bin centers sit at y = (code - 127.5) / 127.5, except the center code
    itself, which is pinned to exactly zero (mid-rise grid with an
    exact-zero center), so decode(encode(0)) == 0 and every code survives
    an encode round trip.
    """
    c = np.asarray(code, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() > 255):
        raise ValueError("codes must lie in 0..255")
    y = (c.astype(np.float64) - 127.5) / 127.5
    y = np.where(c == SILENCE_CODE, 0.0, y)
    x = np.sign(y) * (np.exp(np.abs(y) * _LOG1P_MU) - 1.0) / _MU
    return x if x.ndim else np.float64(x)


# ---------------------------------------------------------------------------
# WAV


def write_wav(path, clip: AudioClip) -> None:
    x = np.clip(clip.samples.astype(np.float64), -1.0, 1.0)
    pcm = np.rint(x * 32767.0).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, clip.sample_rate,
                                    clip.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as fh:
        fh.write(header + data)


def read_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        tag = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise ValueError(f"{path}: truncated {tag!r} chunk")
        if tag == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif tag == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1 or bits != 16:
        raise ValueError(f"{path}: only PCM16 is supported")
    if channels != 1:
        raise ValueError(f"{path}: expected mono, got {channels} channels")
    pcm = np.frombuffer(data, dtype="<i2")
    return AudioClip(samples=(pcm.astype(np.float64) / 32767.0).astype(np.float32),
                     sample_rate=rate)


# ---------------------------------------------------------------------------
# WNF1 feature files

_WNF_MAGIC = b"WNF1"
_WNF_VERSION = 1


def write_features(path, fm: FeatureMatrix) -> None:
    payload = fm.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_WNF_MAGIC)
        fh.write(struct.pack("<III", _WNF_VERSION, fm.frames, fm.bands))
        fh.write(payload)


def read_features(path, expected_bands: int | None = None) -> FeatureMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _WNF_MAGIC:
        raise ValueError(f"{path}: bad feature file magic")
    version, frames, bands = struct.unpack("<III", raw[4:16])
    if version != _WNF_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    need = frames * bands * 4
    if len(raw) - 16 != need:
        raise ValueError(f"{path}: truncated payload ({len(raw) - 16} of {need} bytes)")
    if expected_bands is not None and bands != expected_bands:
        raise ValueError(f"{path}: {bands} bands, expected {expected_bands}")
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(frames, bands)
    return FeatureMatrix(data=data.copy())


# ---------------------------------------------------------------------------
# Checkpoint container


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    seed: int = 0
    fmt: str = "FP32"
    masks: dict | None = None           # name -> compression.Mask
    int8_scales: dict | None = None     # key -> IntQuantParams
    pruning: dict | None = None         # schedule state, free-form
    metadata: dict = field(default_factory=dict)


_CKPT_MAGIC = "WNCKPT1"


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    blobs: list[bytes] = []
    offset = 0

    def add_blob(data: bytes) -> tuple[int, int, int]:
        nonlocal offset
        entry = (offset, len(data), zlib.crc32(data) & 0xFFFFFFFF)
        blobs.append(data)
        offset += len(data)
        return entry

    tensors = []
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        off, nbytes, crc = add_blob(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": off, "nbytes": nbytes, "crc32": crc})

    masks = []
    if ckpt.masks:
        for name in sorted(ckpt.masks):
            mask = ckpt.masks[name]
            keep = np.asarray(mask.keep, dtype=bool)
            packed = np.packbits(keep.reshape(-1), bitorder="little").tobytes()
            off, nbytes, crc = add_blob(packed)
            masks.append({"name": name, "scheme": mask.scheme,
                          "shape": list(keep.shape), "popcount": int(keep.sum()),
                          "offset": off, "nbytes": nbytes, "crc32": crc})

    scales = None
    if ckpt.int8_scales is not None:
        scales = {k: {"scale": float(p.scale), "degenerate": bool(p.degenerate)}
                  for k, p in ckpt.int8_scales.items()}

    manifest = {
        "tool": "wavepress",
        "version": 1,
        "config": ckpt.config,
        "seed": ckpt.seed,
        "format": ckpt.fmt,
        "pruning": ckpt.pruning,
        "int8_scales": scales,
        "metadata": ckpt.metadata,
        "tensors": tensors,
        "masks": masks,
    }
    body = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{_CKPT_MAGIC} {len(body)}\n".encode("ascii"))
        fh.write(body)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii", errors="replace").split()
        if len(head) != 2 or head[0] != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        manifest = json.loads(fh.read(int(head[1])).decode("utf-8"))
        raw = fh.read()

    def fetch(entry: dict) -> bytes:
        chunk = raw[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: blob for {entry['name']} is truncated")
        if (zlib.crc32(chunk) & 0xFFFFFFFF) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in tensor {entry['name']!r}")
        return chunk

    params = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(fetch(entry), dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = arr.copy()

    masks = None
    if manifest["masks"]:
        from . import compression  # deferred: compression depends on the model

        masks = {}
        for entry in manifest["masks"]:
            shape = tuple(entry["shape"])
            numel = int(np.prod(shape))
            bits = np.unpackbits(np.frombuffer(fetch(entry), dtype=np.uint8),
                                 bitorder="little")[:numel]
            keep = bits.astype(bool).reshape(shape)
            if int(keep.sum()) != entry["popcount"]:
                raise CheckpointError(
                    f"{path}: mask popcount mismatch for {entry['name']!r}")
            masks[entry["name"]] = compression.Mask(
                name=entry["name"], scheme=entry["scheme"], keep=keep)

    scales = None
    if manifest.get("int8_scales") is not None:
        from .numerics import IntQuantParams

        scales = {k: IntQuantParams(scale=v["scale"], degenerate=v["degenerate"])
                  for k, v in manifest["int8_scales"].items()}

    return Checkpoint(params=params, config=manifest["config"],
                      seed=manifest["seed"], fmt=manifest["format"],
                      masks=masks, int8_scales=scales,
                      pruning=manifest.get("pruning"),
                      metadata=manifest.get("metadata") or {})


# ---------------------------------------------------------------------------
# Synthetic desk-scale dataset


def synth_dataset(seed: int, n_clips: int, duration: float,
                  sample_rate: int = 16000, bands: int = 80) -> list[tuple[AudioClip, FeatureMatrix]]:
    """Deterministic harmonic tones with aligned conditioning features.

    Each clip is a pitched tone (80..400 Hz) with a slow amplitude
    envelope. Features are one frame per 200 samples: a one-hot at the
    band indexing the pitch, scaled by the frame's log-amplitude, so the
    features fully determine the waveform family.
    """
    if n_clips < 1:
        raise ValueError("need at least one clip")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_clips):
        f0 = float(rng.uniform(80.0, 400.0))
        frames = max(1, int(round(duration * sample_rate / HOP)))
        n = frames * HOP
        t = np.arange(n) / sample_rate
        amps = rng.uniform(0.3, 1.0, size=4) / np.arange(1, 5)
        phases = rng.uniform(0, 2 * np.pi, size=4)
        wave = np.zeros(n)
        for h in range(4):
            wave += amps[h] * np.sin(2 * np.pi * (h + 1) * f0 * t + phases[h])
        envelope = 0.2 + 0.8 * np.sin(np.pi * np.arange(n) / n) ** 2
        wave *= envelope
        peak_target = float(rng.uniform(0.4, 0.9))
        wave *= peak_target / max(np.max(np.abs(wave)), 1e-12)

        pitch_band = min(bands - 1, int((f0 - 80.0) / (400.0 - 80.0) * bands))
        frame_rms = np.sqrt(np.mean(wave.reshape(frames, HOP) ** 2, axis=1))
        feats = np.zeros((frames, bands), dtype=np.float32)
        feats[:, pitch_band] = 1.0 + np.log1p(10.0 * frame_rms)
        out.append((AudioClip(samples=wave.astype(np.float32), sample_rate=sample_rate),
                    FeatureMatrix(data=feats)))
    return out


def write_dataset(directory, dataset, manifest_name: str = "manifest.tsv") -> str:
    """Write clips as WAV + WNF1 pairs and a manifest of one pair per line."""
    import os

    os.makedirs(directory, exist_ok=True)
    manifest_path = os.path.join(directory, manifest_name)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for i, (clip, feats) in enumerate(dataset):
            wav_path = os.path.join(directory, f"clip{i:04d}.wav")
            feat_path = os.path.join(directory, f"clip{i:04d}.wnf")
            write_wav(wav_path, clip)
            write_features(feat_path, feats)
            fh.write(f"{wav_path}\t{feat_path}\n")
    return manifest_path


def load_dataset_manifest(path) -> list[tuple[AudioClip, FeatureMatrix]]:
    dataset = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: manifest lines must be 'wav<TAB>features'")
            dataset.append((read_wav(parts[0]), read_features(parts[1])))
    if not dataset:
        raise ValueError(f"{path}: empty dataset manifest")
    return dataset
