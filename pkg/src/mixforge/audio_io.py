"""WAV decoding/encoding, resampling and fixed-length clipping.

Only the RIFF/WAVE container with PCM16 or IEEE float32 payloads is
understood. Everything is returned as float64 mono in [-1, 1].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
MODEL_INPUT_SAMPLES = 64000  # 4 s at 16 kHz

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class EmptyAudioError(WavError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyAudioError("waveform has no samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _iter_chunks(blob: bytes):
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedWavError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> Waveform:
    """Decode a PCM16 or float32 WAV file into a mono :class:`Waveform`.

    Stereo (or wider) files are averaged across channels.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    for cid, body in _iter_chunks(blob):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            tag = fmt[0]
            if tag == _FORMAT_EXTENSIBLE:
                if len(body) < 40:
                    raise MalformedWavError(f"{path}: extensible fmt chunk too short")
                # first two bytes of the subformat GUID carry the real tag
                tag = struct.unpack_from("<H", body, 24)[0]
                fmt = (tag,) + fmt[1:]
        elif cid == b"data":
            data = body
    if fmt is None:
        raise MalformedWavError(f"{path}: missing fmt chunk")
    if data is None:
        raise MalformedWavError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise MalformedWavError(f"{path}: bad channel count or rate ({channels}, {rate})")
    if tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncodingError(f"{path}: format tag {tag:#06x} with {bits} bits")

    frame = dtype.itemsize * channels
    n_frames = len(data) // frame
    if n_frames == 0:
        raise EmptyAudioError(f"{path}: empty data chunk")
    raw = np.frombuffer(data[: n_frames * frame], dtype=dtype).astype(np.float64) * scale
    mono = raw.reshape(n_frames, channels).mean(axis=1)
    if tag == _FORMAT_FLOAT:
        mono = np.clip(np.nan_to_num(mono), -1.0, 1.0)
    return Waveform(mono, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Quantize to int16 codes, saturating out-of-range values."""
    codes = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(codes, -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    """Write *w* as a 16-bit mono PCM WAV."""
    if not isinstance(w, Waveform):
        w = Waveform(*w)
    payload = to_pcm16(w.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _FORMAT_PCM, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampler."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = max(1, int(round(len(w) * target_rate / w.sample_rate)))
    positions = np.arange(n_out) * (w.sample_rate / target_rate)
    out = np.interp(positions, np.arange(len(w)), w.samples)
    return Waveform(out, target_rate)


def tile_to_length(x: np.ndarray, n: int) -> np.ndarray:
    """Repeat *x* end to end and truncate to exactly *n* samples."""
    reps = -(-n // x.size)
    return np.tile(x, reps)[:n]


def fix_length(w: Waveform, n_samples: int = MODEL_INPUT_SAMPLES,
               mode: str = "crop-random", seed=0) -> Waveform:
    """Force *w* to exactly ``n_samples`` samples.

    Short inputs are always repeat-tiled. Long inputs are cut to a
    seed-determined contiguous window when ``mode == "crop-random"`` and to
    their head when ``mode == "pad-repeat"``.
    """
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if mode not in ("pad-repeat", "crop-random"):
        raise ValueError(f"unknown mode {mode!r}")
    x = w.samples
    if x.size == n_samples:
        return Waveform(x.copy(), w.sample_rate)
    if x.size < n_samples:
        return Waveform(tile_to_length(x, n_samples), w.sample_rate)
    start = 0
    if mode == "crop-random":
        start = int(np.random.default_rng(seed).integers(0, x.size - n_samples + 1))
    return Waveform(x[start : start + n_samples].copy(), w.sample_rate)
