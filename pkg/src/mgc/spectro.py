"""STFT and spectrogram images, plus the two fixed transform presets.

Image orientation: rows are frequency bins (row 0 = lowest frequency of the
band), columns are STFT frames.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import Waveform
from .nn.functional import bilinear_matrix

WINDOWS = ("hann", "hamming", "rect")


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 256
    fft_len: int = 1024
    window_fn: str = "hann"
    center_pad: bool = False

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len <= self.fft_len:
            raise ValueError("need 0 < hop <= window_len <= fft_len")
        if self.fft_len & (self.fft_len - 1):
            raise ValueError("fft_len must be a power of two")
        if self.window_fn not in WINDOWS:
            raise ValueError(f"unknown window {self.window_fn!r}")


@dataclass(frozen=True)
class SpectrogramConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 64000
    freq_lo_hz: float = 2000.0
    freq_hi_hz: float = 28000.0
    log_floor_db: float = -80.0
    gain_db: float = 0.0
    out_h: int = 128
    out_w: int = 128
    norm_mean: float = 0.45
    norm_std: float = 0.225
    # dB are taken relative to this magnitude; presets use the window sum so
    # a full-scale sinusoid sits near -6 dB
    ref_magnitude: float = 1.0

    def __post_init__(self):
        if not 0 <= self.freq_lo_hz < self.freq_hi_hz <= self.sample_rate / 2:
            raise ValueError("need 0 <= freq_lo < freq_hi <= Nyquist")
        if self.out_h <= 0 or self.out_w <= 0:
            raise ValueError("output size must be positive")
        if self.norm_std <= 0:
            raise ValueError("norm_std must be positive")
        if self.log_floor_db >= 0:
            raise ValueError("log_floor_db must be negative")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Spectrogram:
    pixels: np.ndarray
    cfg_fingerprint: str


def window(name: str, n: int) -> np.ndarray:
    k = np.arange(n)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * k / n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * k / n)
    if name == "rect":
        return np.ones(n)
    raise ValueError(f"unknown window {name!r}")


def stft(w: Waveform, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, shape (fft_len // 2 + 1, n_frames). Unnormalized DFT."""
    x = np.asarray(w.samples, dtype=np.float64)
    if cfg.center_pad:
        pad = cfg.window_len // 2
        x = np.pad(x, (pad, pad))
    if len(x) < cfg.window_len:
        raise ValueError(f"waveform of {len(x)} samples is shorter than the {cfg.window_len}-sample window")
    n_frames = 1 + (len(x) - cfg.window_len) // cfg.hop
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, cfg.window_len), strides=(x.strides[0] * cfg.hop, x.strides[0]), writeable=False)
    return np.fft.rfft(frames * window(cfg.window_fn, cfg.window_len), n=cfg.fft_len, axis=1).T


def band_rows(cfg: SpectrogramConfig) -> slice:
    freqs = np.arange(cfg.stft.fft_len // 2 + 1) * cfg.sample_rate / cfg.stft.fft_len
    idx = np.nonzero((freqs >= cfg.freq_lo_hz) & (freqs <= cfg.freq_hi_hz))[0]
    if idx.size == 0:
        raise ValueError("frequency band is empty after crop")
    return slice(int(idx[0]), int(idx[-1]) + 1)


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (corner-aligned false)."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    return bilinear_matrix(out_h, h) @ img @ bilinear_matrix(out_w, w).T


def to_db_image(S: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Magnitude -> clamped dB -> gain -> band crop -> resize (pre-normalization)."""
    if S.shape[0] != cfg.stft.fft_len // 2 + 1:
        raise ValueError(f"expected {cfg.stft.fft_len // 2 + 1} frequency bins, got {S.shape[0]}")
    mag = np.abs(S) / cfg.ref_magnitude
    floor_lin = 10.0 ** (cfg.log_floor_db / 20.0)
    db = 20.0 * np.log10(np.maximum(mag, floor_lin))
    db = db + cfg.gain_db
    rows = band_rows(cfg)
    return resize(db[rows], cfg.out_h, cfg.out_w)


def normalize(db: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Map dB pixels to unit range via the floor, then standardize."""
    unit = (db - cfg.log_floor_db) / -cfg.log_floor_db
    return (unit - cfg.norm_mean) / cfg.norm_std


def denormalize(pixels: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    unit = pixels * cfg.norm_std + cfg.norm_mean
    return unit * -cfg.log_floor_db + cfg.log_floor_db


def to_spectrogram(S: np.ndarray, cfg: SpectrogramConfig) -> Spectrogram:
    return Spectrogram(normalize(to_db_image(S, cfg), cfg), cfg.fingerprint())


# -- presets -------------------------------------------------------------------

def _preset(stft_cfg: StftConfig, **kw) -> SpectrogramConfig:
    ref = float(window(stft_cfg.window_fn, stft_cfg.window_len).sum())
    return SpectrogramConfig(stft=stft_cfg, ref_magnitude=ref, **kw)


ORIGIN = _preset(StftConfig(1024, 256, 1024, "hann"), freq_lo_hz=2000.0, freq_hi_hz=28000.0,
                 gain_db=0.0, log_floor_db=-80.0)
ALT = _preset(StftConfig(512, 128, 512, "hamming"), freq_lo_hz=500.0, freq_hi_hz=32000.0,
              gain_db=6.0, log_floor_db=-100.0)
PRESETS = {"origin": ORIGIN, "alt": ALT}


def preset(name: str) -> SpectrogramConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown transform preset {name!r}; choose from {sorted(PRESETS)}") from None


def transform(w: Waveform, name: str = "origin") -> Spectrogram:
    cfg = preset(name)
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"preset {name!r} expects {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    return to_spectrogram(stft(w, cfg.stft), cfg)


def origin_transform(w: Waveform) -> Spectrogram:
    return transform(w, "origin")


def alt_transform(w: Waveform) -> Spectrogram:
    return transform(w, "alt")


def clean_reference_mask(clean: Waveform, name: str = "origin", fraction: float = 0.1) -> np.ndarray:
    """Binary mask of pixels whose clean magnitude is at least ``fraction`` of the peak."""
    cfg = preset(name)
    S = stft(clean, cfg.stft)
    if not np.any(np.abs(S) > 0):
        return np.zeros((cfg.out_h, cfg.out_w), dtype=np.uint8)
    db = to_db_image(S, cfg)
    return (db >= db.max() + 20.0 * np.log10(fraction)).astype(np.uint8)
