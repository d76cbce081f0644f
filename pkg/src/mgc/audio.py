"""WAV input/output and the seeded synthetic bioacoustic corpus.

The synthetic clips stand in for passive-acoustic recordings: FM whistles,
broadband beluga click trains and narrowband porpoise click trains mixed into
white, pink or vessel-like background noise at a requested SNR. Each clip
comes with its label vector and a ground-truth mask computed from the clean
(noise-free) signal's spectrogram.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

EVENT_KINDS = ("whistle", "beluga_click_train", "porpoise_click_train")
NOISE_KINDS = ("white", "pink", "vessel_band")

# foreground iff clean magnitude >= GT_FRACTION * clip peak
GT_FRACTION = 0.1


class WavError(Exception):
    """Base class for WAV decoding problems."""


class MalformedWavError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("Waveform holds mono samples only")
        if not np.isfinite(self.samples).all():
            raise ValueError("Waveform samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# -- WAV codec -------------------------------------------------------------------

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav(path) -> Waveform:
    """Read a PCM16 or float32 RIFF/WAVE file; stereo is averaged to mono."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE and size >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise MalformedWavError(f"{path}: bad channel count or sample rate")
    if tag == _PCM and bits == 16:
        x = np.frombuffer(data[:len(data) - len(data) % 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        x = np.frombuffer(data[:len(data) - len(data) % 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{path}: format tag {tag} with {bits} bits is not supported")
    x = x[:len(x) - len(x) % channels].reshape(-1, channels).mean(axis=1)
    if x.size == 0:
        raise MalformedWavError(f"{path}: no samples")
    return Waveform(x, rate)


def write_wav(w: Waveform, path, codec: str = "pcm16") -> None:
    """Write mono PCM16 (default) or float32 WAV. Out-of-range samples are clipped."""
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    if np.abs(x).max() > 1.0:
        logger.warning("clipping %d samples outside [-1, 1]", int((np.abs(x) > 1.0).sum()))
        x = np.clip(x, -1.0, 1.0)
    if codec == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif codec == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown codec {codec!r}")
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, w.sample_rate, w.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# -- synthesis -------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    kind: str
    start_s: float
    duration_s: float
    base_freq_hz: float


@dataclass
class SynthSpec:
    duration_s: float = 3.0
    sample_rate: int = 64000
    snr_db: float = 5.0
    events: list[Event] = field(default_factory=list)
    noise_kind: str = "white"

    def validate(self) -> None:
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ValueError("duration and sample rate must be positive")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        nyquist = self.sample_rate / 2
        for ev in self.events:
            if ev.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {ev.kind!r}")
            if ev.start_s < 0 or ev.duration_s <= 0 or ev.start_s + ev.duration_s > self.duration_s + 1e-9:
                raise ValueError(f"event {ev} does not fit in a {self.duration_s} s clip")
            if not 0 < ev.base_freq_hz < nyquist:
                raise ValueError(f"event base frequency {ev.base_freq_hz} Hz exceeds Nyquist {nyquist} Hz")
            if ev.kind == "whistle" and ev.base_freq_hz * WHISTLE_SWEEP >= nyquist:
                raise ValueError(f"whistle sweep from {ev.base_freq_hz} Hz exceeds Nyquist {nyquist} Hz")


def label_vector(spec: SynthSpec) -> tuple[int, int, int]:
    present = {ev.kind for ev in spec.events}
    return tuple(int(k in present) for k in EVENT_KINDS)


WHISTLE_SWEEP = 1.6  # top of the FM sweep relative to base frequency

# per-kind amplitudes chosen so each event peaks at a similar STFT magnitude
_AMPLITUDE = {"whistle": 0.02, "beluga_click_train": 2.7, "porpoise_click_train": 0.2}


def _fade(n: int, sr: int, fade_s: float = 0.01) -> np.ndarray:
    env = np.ones(n)
    m = min(int(fade_s * sr), n // 2)
    if m > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
        env[:m] = ramp
        env[n - m:] = ramp[::-1]
    return env


def _whistle(ev: Event, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(ev.duration_s * sr))
    t = np.arange(n) / sr
    # rising or falling sweep with a little curvature
    u = t / ev.duration_s
    shape = rng.choice([0, 1, 2])
    if shape == 0:
        frac = u
    elif shape == 1:
        frac = 1.0 - u
    else:
        frac = np.sin(np.pi * u)
    f = ev.base_freq_hz * (1.0 + (WHISTLE_SWEEP - 1.0) * frac)
    phase = 2 * np.pi * np.cumsum(f) / sr + rng.uniform(0, 2 * np.pi)
    out = np.sin(phase)
    # harmonics that stay clear of Nyquist
    for h, amp in ((2, 0.5), (3, 0.3)):
        if h * f.max() < 0.45 * sr:
            out += amp * np.sin(h * phase)
    return out * _fade(n, sr)


def _pulse_times(ev: Event, rng: np.random.Generator, ici_range: tuple[float, float]) -> np.ndarray:
    ici = rng.uniform(*ici_range)
    times = np.arange(ev.start_s + 0.005, ev.start_s + ev.duration_s - 0.005, ici)
    return times + rng.normal(scale=0.05 * ici, size=times.size)


def _click_train(ev: Event, total: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(total)
    if ev.kind == "beluga_click_train":
        times = _pulse_times(ev, rng, (0.03, 0.06))
        sigma = 1.5 / sr  # ~2 samples: essentially broadband
    else:
        times = _pulse_times(ev, rng, (0.04, 0.09))
        sigma = 3e-4  # long pulse: narrowband around the carrier
    half = int(np.ceil(5 * sigma * sr))
    k = np.arange(-half, half + 1)
    for tc in times:
        c = int(round(tc * sr))
        frac = tc * sr - c
        tt = (k - frac) / sr
        pulse = np.exp(-0.5 * (tt / sigma) ** 2) * np.cos(2 * np.pi * ev.base_freq_hz * tt)
        lo, hi = max(c - half, 0), min(c + half + 1, total)
        out[lo:hi] += pulse[lo - (c - half):hi - (c - half)]
    return out


def _noise(kind: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.normal(size=n)
    if kind == "white":
        return white
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / sr)
    if kind == "pink":
        spec[1:] /= np.sqrt(f[1:] / f[1])
        spec[0] = 0
        return np.fft.irfft(spec, n)
    # vessel: strong low-frequency rumble plus a few constant tonal lines
    shape = 1.0 / (1.0 + (f / 1500.0) ** 2) + 0.05
    x = np.fft.irfft(spec * shape, n)
    x /= x.std()
    t = np.arange(n) / sr
    shaft = rng.uniform(2500, 7000)
    for h in range(1, 4):
        if h * shaft < sr / 2:
            x += rng.uniform(0.1, 0.3) * np.sin(2 * np.pi * h * shaft * t + rng.uniform(0, 2 * np.pi))
    return x


def render_clean(spec: SynthSpec, seed: int) -> np.ndarray:
    """Sum of all events, before noise. Pure function of (spec, seed)."""
    spec.validate()
    sr = spec.sample_rate
    total = int(round(spec.duration_s * sr))
    rng = np.random.default_rng([seed, 1])
    clean = np.zeros(total)
    for ev in spec.events:
        level = _AMPLITUDE[ev.kind] * 10 ** (rng.uniform(-6, 0) / 20)
        if ev.kind == "whistle":
            seg = _whistle(ev, sr, rng)
            i0 = int(round(ev.start_s * sr))
            seg = seg[:total - i0]
            clean[i0:i0 + len(seg)] += level * seg
        else:
            clean += level * _click_train(ev, total, sr, rng)
    return clean


def _active(spec: SynthSpec, total: int) -> np.ndarray:
    act = np.zeros(total, dtype=bool)
    for ev in spec.events:
        i0 = int(round(ev.start_s * spec.sample_rate))
        i1 = int(round((ev.start_s + ev.duration_s) * spec.sample_rate))
        act[i0:i1] = True
    return act


NOISE_ONLY_RMS = 0.01
PEAK_LEVEL = 0.9


def mix(spec: SynthSpec, seed: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Return (mixture, clean, gain) with ``mixture = gain * (clean + noise)``.

    Noise power is set so that 10·log10(P_signal / P_noise) = snr_db, where
    P_signal is the clean power over the samples covered by events.
    """
    clean = render_clean(spec, seed)
    total = clean.size
    noise = _noise(spec.noise_kind, total, spec.sample_rate, np.random.default_rng([seed, 2]))
    noise /= np.sqrt(np.mean(noise ** 2))
    act = _active(spec, total)
    if act.any():
        p_sig = float(np.mean(clean[act] ** 2))
        noise *= np.sqrt(p_sig / 10 ** (spec.snr_db / 10))
    else:
        noise *= NOISE_ONLY_RMS
    x = clean + noise
    gain = PEAK_LEVEL / np.abs(x).max()
    return gain * x, gain * clean, gain


def synthesize_clip(spec: SynthSpec, seed: int, transform: str = "origin"):
    """Render one labelled clip.

    Returns ``(waveform, label_vector, gt_mask)`` where ``gt_mask`` is a binary
    image in the coordinates of the chosen spectrogram preset.
    """
    from .spectro import clean_reference_mask

    x, clean, _ = mix(spec, seed)
    mask = clean_reference_mask(Waveform(clean, spec.sample_rate), transform, GT_FRACTION)
    return Waveform(x, spec.sample_rate), label_vector(spec), mask


# -- corpus recipe --------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    duration_s: float = 3.0
    sample_rate: int = 64000
    snr_range: tuple[float, float] = (-5.0, 15.0)
    seed: int = 0

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test


def random_spec(rng: np.random.Generator, joint: int, cfg: CorpusConfig) -> SynthSpec:
    """Random clip description whose label vector encodes ``joint`` (whistle MSB)."""
    dur = cfg.duration_s
    events: list[Event] = []
    flags = ((joint >> 2) & 1, (joint >> 1) & 1, joint & 1)
    if flags[0]:
        for _ in range(rng.integers(1, 3)):
            d = rng.uniform(0.4, 1.4)
            events.append(Event("whistle", float(rng.uniform(0, dur - d)), float(d),
                                float(rng.uniform(4000, 12000))))
    if flags[1]:
        d = rng.uniform(0.5, 1.5)
        events.append(Event("beluga_click_train", float(rng.uniform(0, dur - d)), float(d),
                            float(rng.uniform(10000, 18000))))
    if flags[2]:
        d = rng.uniform(0.5, 1.5)
        events.append(Event("porpoise_click_train", float(rng.uniform(0, dur - d)), float(d),
                            float(rng.uniform(20000, 26000))))
    return SynthSpec(duration_s=dur, sample_rate=cfg.sample_rate,
                     snr_db=float(rng.uniform(*cfg.snr_range)), events=events,
                     noise_kind=str(rng.choice(NOISE_KINDS)))


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    split: str
    spec: SynthSpec
    seed: int

    @property
    def label(self) -> tuple[int, int, int]:
        return label_vector(self.spec)


def corpus_records(cfg: CorpusConfig) -> list[ClipRecord]:
    """Deterministic clip list; joint classes are balanced within each split."""
    rng = np.random.default_rng([cfg.seed, 100])
    records = []
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        joints = np.arange(n) % 8
        rng.shuffle(joints)
        for j in joints:
            idx = len(records)
            spec = random_spec(rng, int(j), cfg)
            records.append(ClipRecord(f"clip{idx:05d}", split, spec, int(cfg.seed * 1_000_003 + idx)))
    return records


MANIFEST_FIELDS = ("clip_id", "wav_path", "y_whistle", "y_beluga", "y_porpoise", "snr_db", "seed")


def write_manifest(rows: Sequence[dict], path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else list(MANIFEST_FIELDS),
                            lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    tmp.replace(path)


def read_manifest(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
