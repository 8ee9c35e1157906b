"""Seeded synthetic soundscapes with exactly known call annotations.

Each file is background noise plus down-sweeping FM calls (some carrying
non-linear phenomena: a subharmonic at f0/2 and an abrupt mid-call frequency
jump) and unlabeled distractors (trains of broadband clicks and out-of-band tones).
File ``i`` depends only on ``(seed, i)``, so files can be generated in any
order or in parallel without changing their content.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, quantize, write_wav
from .call_classifier import CallClass
from .errors import BadConfig

MIN_EVENT_GAP_SEC = 0.5
EDGE_MARGIN_SEC = 0.1
JUMP_FRACTION = 0.2
SUBHARMONIC_GAIN = 0.6
HARMONIC_GAIN = 0.35
CLICK_DECAY_SEC = 0.004
CLICK_PEAK = 8.0
CLICK_SPACING_SEC = (0.03, 0.08)


@dataclass(frozen=True)
class SynthConfig:
    sample_rate_hz: int = 16000
    file_duration_sec: float = 60.0
    n_files: int = 50
    calls_per_minute: float = 4.0
    call_duration_sec: tuple = (0.3, 1.5)
    call_f0_hz: tuple = (800.0, 1300.0)
    snr_db: float = 10.0
    nlp_fraction: float = 0.3
    distractor_rate: float = 2.0
    noise_kind: str = "pink"
    noise_rms: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "call_duration_sec", tuple(map(float, self.call_duration_sec)))
        object.__setattr__(self, "call_f0_hz", tuple(map(float, self.call_f0_hz)))
        self.validate()

    def validate(self):
        lo, hi = self.call_duration_sec
        f_lo, f_hi = self.call_f0_hz
        nyquist = self.sample_rate_hz / 2
        problems = []
        if self.sample_rate_hz <= 0:
            problems.append("sample_rate_hz must be positive")
        if self.file_duration_sec <= 0:
            problems.append("file_duration_sec must be positive")
        if self.n_files < 0:
            problems.append("n_files must be >= 0")
        if not 0 < lo < hi:
            problems.append("call_duration_sec must satisfy 0 < min < max")
        elif hi + 2 * EDGE_MARGIN_SEC > self.file_duration_sec:
            problems.append("longest call does not fit in a file")
        if not 0 < f_lo < f_hi:
            problems.append("call_f0_hz must satisfy 0 < min < max")
        elif f_hi * (1 + JUMP_FRACTION) * 2 >= nyquist:
            problems.append("call harmonics exceed Nyquist")
        if self.calls_per_minute < 0 or self.distractor_rate < 0:
            problems.append("rates must be >= 0")
        if not np.isfinite(self.snr_db):
            problems.append("snr_db must be finite")
        if not 0 <= self.nlp_fraction <= 1:
            problems.append("nlp_fraction must be in [0, 1]")
        if self.noise_kind not in ("white", "pink"):
            problems.append("noise_kind must be 'white' or 'pink'")
        if not self.noise_rms > 0:
            problems.append("noise_rms must be positive")
        if problems:
            raise BadConfig("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["call_duration_sec"] = list(self.call_duration_sec)
        d["call_f0_hz"] = list(self.call_f0_hz)
        return d


@dataclass(frozen=True)
class SynthLabel:
    file: str
    start_sec: float
    end_sec: float
    call_class: CallClass


@dataclass(frozen=True)
class Distractor:
    start_sec: float
    end_sec: float
    kind: str


@dataclass(eq=False)
class SynthFile:
    file_id: str
    clip: AudioClip
    labels: list[SynthLabel]
    distractors: list[Distractor] = field(default_factory=list)
    call_track: np.ndarray | None = None


@dataclass(eq=False)
class Benchmark:
    config: SynthConfig
    train: list[SynthFile]
    validation: list[SynthFile]

    @property
    def files(self) -> list[SynthFile]:
        return self.train + self.validation


def file_id(index: int) -> str:
    return f"synth_{index:03d}"


def make_noise(rng, n, kind):
    white = rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(white)
        f = np.arange(len(spec))
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0.0
        white = np.fft.irfft(spec, n)
    return white / np.sqrt(np.mean(white ** 2))


def hann_envelope(n):
    """Hann-shaped envelope sampled at half-sample offsets; strictly positive."""
    return np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2


def synth_call(rng, n, rate, cfg: SynthConfig, nonlinear: bool, level_rms: float):
    f_lo, f_hi = cfg.call_f0_hz
    mid = 0.5 * (f_lo + f_hi)
    f_start = rng.uniform(mid, f_hi)
    f_end = rng.uniform(f_lo, mid)
    frac = np.arange(n) / n
    f0 = f_start + (f_end - f_start) * frac
    if nonlinear:
        f0 = np.where(frac >= 0.5, f0 * (1 + JUMP_FRACTION), f0)
    phase = 2 * np.pi * np.cumsum(f0) / rate + rng.uniform(0, 2 * np.pi)
    wave = np.sin(phase) + HARMONIC_GAIN * np.sin(2 * phase)
    if nonlinear:
        wave += SUBHARMONIC_GAIN * np.sin(0.5 * phase)
    wave *= hann_envelope(n)
    return wave * (level_rms / np.sqrt(np.mean(wave ** 2)))


def synth_distractor(rng, kind, n, rate, cfg: SynthConfig, level_rms: float):
    if kind == "click":
        out = np.zeros(n)
        click_len = min(n, int(round(CLICK_DECAY_SEC * 8 * rate)))
        decay = np.exp(-np.arange(click_len) / (CLICK_DECAY_SEC * rate))
        pos = 0
        while pos < n:
            burst = rng.standard_normal(click_len) * decay
            seg = out[pos:pos + click_len]
            seg += (burst * (CLICK_PEAK * level_rms / np.max(np.abs(burst))))[:len(seg)]
            pos += int(round(rng.uniform(*CLICK_SPACING_SEC) * rate))
        return out
    nyquist = rate / 2
    f_lo, f_hi = cfg.call_f0_hz
    if rng.random() < 0.5 and f_lo / 2 > 100:
        freq = rng.uniform(100, f_lo / 2)
    else:
        freq = rng.uniform(min(2.5 * f_hi, 0.8 * nyquist), 0.9 * nyquist)
    wave = np.sin(2 * np.pi * freq * np.arange(n) / rate + rng.uniform(0, 2 * np.pi))
    return wave * hann_envelope(n) * (level_rms / np.sqrt(np.mean(hann_envelope(n) ** 2) / 2))


def _place(rng, duration, length, taken, gap):
    lo, hi = EDGE_MARGIN_SEC, duration - length - EDGE_MARGIN_SEC
    if hi <= lo:
        return None
    for _ in range(100):
        start = rng.uniform(lo, hi)
        end = start + length
        if all(end + gap <= s or start >= e + gap for s, e in taken):
            return start
    return None


def generate_file(cfg: SynthConfig, index: int, keep_track: bool = False) -> SynthFile:
    rng = np.random.default_rng([cfg.seed, index])
    rate = cfg.sample_rate_hz
    n = int(round(cfg.file_duration_sec * rate))
    fid = file_id(index)
    noise = make_noise(rng, n, cfg.noise_kind) * cfg.noise_rms
    call_rms = cfg.noise_rms * 10 ** (cfg.snr_db / 20)
    calls = np.zeros(n)
    other = np.zeros(n)

    taken = []
    labels = []
    n_calls = rng.poisson(cfg.calls_per_minute * cfg.file_duration_sec / 60.0)
    for _ in range(n_calls):
        length = rng.uniform(*cfg.call_duration_sec)
        nonlinear = rng.random() < cfg.nlp_fraction
        start = _place(rng, cfg.file_duration_sec, length, taken, MIN_EVENT_GAP_SEC)
        if start is None:
            continue
        lo = int(round(start * rate))
        hi = min(n, int(round((start + length) * rate)))
        calls[lo:hi] += synth_call(rng, hi - lo, rate, cfg, nonlinear, call_rms)
        taken.append((lo / rate, hi / rate))
        cls = CallClass.NONLINEAR_CALL if nonlinear else CallClass.CLEAN_CALL
        labels.append(SynthLabel(fid, lo / rate, hi / rate, cls))

    distractors = []
    n_distract = rng.poisson(cfg.distractor_rate * cfg.file_duration_sec / 60.0)
    for _ in range(n_distract):
        kind = "click" if rng.random() < 0.5 else "tone"
        length = rng.uniform(0.2, 0.6)
        start = _place(rng, cfg.file_duration_sec, length, taken, MIN_EVENT_GAP_SEC)
        if start is None:
            continue
        lo = int(round(start * rate))
        hi = min(n, int(round((start + length) * rate)))
        other[lo:hi] += synth_distractor(rng, kind, hi - lo, rate, cfg, call_rms)
        taken.append((lo / rate, hi / rate))
        distractors.append(Distractor(lo / rate, hi / rate, kind))

    labels.sort(key=lambda r: r.start_sec)
    distractors.sort(key=lambda r: r.start_sec)
    mix = np.clip(noise + calls + other, -1.0, 1.0)
    clip = AudioClip(quantize(mix), rate)
    return SynthFile(fid, clip, labels, distractors, calls if keep_track else None)


def generate_dataset(cfg: SynthConfig, out_dir=None, keep_tracks=False) -> list[SynthFile]:
    """Generate ``cfg.n_files`` files; with ``out_dir`` also write WAVs and ``labels.csv``."""
    files = [generate_file(cfg, i, keep_tracks) for i in range(cfg.n_files)]
    if out_dir is not None:
        write_dataset(files, out_dir)
    return files


def write_dataset(files, out_dir) -> None:
    from .persistence import LabelRow, write_labels

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for f in files:
        write_wav(f.clip, out / f"{f.file_id}.wav")
        rows.extend(LabelRow(r.file, r.start_sec, r.end_sec, r.call_class) for r in f.labels)
    write_labels(out / "labels.csv", rows)


def standard_benchmark(seed: int = 7, **overrides) -> Benchmark:
    """50 one-minute files at default settings, split 40 train / 10 validation by file."""
    cfg = replace(SynthConfig(n_files=50, seed=seed), **overrides)
    files = generate_dataset(cfg)
    n_train = int(round(0.8 * len(files)))
    return Benchmark(cfg, files[:n_train], files[n_train:])
