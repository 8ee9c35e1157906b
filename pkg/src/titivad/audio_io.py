"""Mono PCM16 WAV reading/writing and fixed-length windowing."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NotWav, Truncated, UnsupportedFormat

PCM_SCALE = 32768.0
DEFAULT_SAMPLE_RATE = 16000
MIN_TAIL_SEC = 1.0


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional (mono)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample_rate_hz must be positive")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return len(self.samples)

    @property
    def duration_sec(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def slice_sec(self, start_sec: float, end_sec: float) -> "AudioClip":
        lo = max(0, int(round(start_sec * self.sample_rate_hz)))
        hi = min(len(self.samples), int(round(end_sec * self.sample_rate_hz)))
        return AudioClip(self.samples[lo:hi], self.sample_rate_hz)


@dataclass(frozen=True, eq=False)
class Window:
    clip: AudioClip
    source_offset_sec: float
    source: str = field(default="")

    @property
    def duration_sec(self) -> float:
        return self.clip.duration_sec


def quantize(samples) -> np.ndarray:
    """Snap float samples onto the PCM16 grid used by :func:`write_wav`."""
    return pcm_words(samples) / PCM_SCALE


def pcm_words(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * PCM_SCALE), -32768, 32767).astype("<i2")


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        yield chunk_id, pos + 8, size
        pos += 8 + size + (size & 1)


def load_wav(path) -> AudioClip:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotWav(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for chunk_id, start, size in _iter_chunks(data):
        if chunk_id == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise Truncated(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", data, start)
        elif chunk_id == b"data":
            if fmt is None:
                raise UnsupportedFormat(f"{path}: data chunk precedes fmt chunk")
            if start + size > len(data):
                raise Truncated(
                    f"{path}: data chunk declares {size} bytes, "
                    f"only {len(data) - start} present"
                )
            pcm = data[start:start + size]
            break
    if fmt is None:
        raise UnsupportedFormat(f"{path}: missing fmt chunk")

    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormat(f"{path}: audio_format={audio_format}, expected PCM (1)")
    if channels != 1:
        raise UnsupportedFormat(f"{path}: {channels} channels, expected mono")
    if bits != 16:
        raise UnsupportedFormat(f"{path}: {bits}-bit samples, expected 16")
    if pcm is None:
        raise Truncated(f"{path}: missing data chunk")
    if len(pcm) == 0:
        raise Truncated(f"{path}: empty data chunk")
    if len(pcm) % 2:
        raise Truncated(f"{path}: odd byte count in 16-bit data chunk")

    words = np.frombuffer(pcm, dtype="<i2")
    return AudioClip(words.astype(np.float64) / PCM_SCALE, rate)


def encode_wav(clip: AudioClip) -> bytes:
    payload = pcm_words(clip.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, clip.sample_rate_hz, clip.sample_rate_hz * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def write_wav(clip: AudioClip, path) -> None:
    """Write ``clip`` as canonical 44-byte-header PCM16 mono.

    Samples are encoded as ``round(s * 32768)`` clamped to the int16 range,
    so ``1.0`` lands on 32767 and decoding then re-encoding is exact.
    """
    Path(path).write_bytes(encode_wav(clip))


def window_segments(clip: AudioClip, window_sec: float, source: str = "",
                    min_tail_sec: float = MIN_TAIL_SEC) -> list[Window]:
    if window_sec <= 0:
        raise ValueError("window_sec must be positive")
    rate = clip.sample_rate_hz
    step = int(round(window_sec * rate))
    min_tail = int(round(min_tail_sec * rate))
    windows = []
    for k, lo in enumerate(range(0, len(clip.samples), step)):
        chunk = clip.samples[lo:lo + step]
        if len(chunk) < step and len(chunk) < min_tail:
            break
        windows.append(Window(AudioClip(chunk, rate), k * window_sec, source))
    return windows
