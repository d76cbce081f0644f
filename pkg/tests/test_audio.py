import hashlib
import struct

import numpy as np
import pytest

from mgc import audio
from mgc.audio import Event, SynthSpec, Waveform


def test_silence_roundtrip(tmp_path):
    p = tmp_path / "s.wav"
    audio.write_wav(Waveform(np.zeros(16000), 16000), p)
    w = audio.read_wav(p)
    assert w.sample_rate == 16000 and len(w.samples) == 16000 and not w.samples.any()


@pytest.mark.parametrize("codec,lsb", [("pcm16", 1 / 32768), ("float32", 1e-7)])
def test_roundtrip_within_lsb(tmp_path, codec, lsb):
    x = np.random.default_rng(0).uniform(-1, 1, 4000)
    p = tmp_path / "r.wav"
    audio.write_wav(Waveform(x, 8000), p, codec=codec)
    assert np.abs(audio.read_wav(p).samples - x).max() <= lsb


def test_sine_amplitude(tmp_path):
    t = np.arange(16000) / 16000
    x = 0.7 * np.sin(2 * np.pi * 440 * t)
    p = tmp_path / "sine.wav"
    audio.write_wav(Waveform(x, 16000), p)
    assert abs(np.abs(audio.read_wav(p).samples).max() - np.abs(x).max()) <= 1 / 32768


def test_header_duration(tmp_path):
    p = tmp_path / "d.wav"
    audio.write_wav(Waveform(np.zeros(16000), 16000), p)
    raw = p.read_bytes()
    byte_rate = struct.unpack_from("<I", raw, 28)[0]
    data_len = struct.unpack_from("<I", raw, 40)[0]
    assert data_len / byte_rate == 1.0


def test_stereo_is_averaged(tmp_path):
    left = np.full(100, 1000, "<i2")
    right = np.full(100, 3000, "<i2")
    payload = np.stack([left, right], axis=1).tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 8000, 32000, 4, 16) + b"data" + struct.pack("<I", len(payload))
    p = tmp_path / "st.wav"
    p.write_bytes(hdr + payload)
    assert np.allclose(audio.read_wav(p).samples, 2000 / 32768)


def test_errors_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        audio.read_wav(tmp_path / "nope.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFX0000WAVE")
    with pytest.raises(audio.MalformedWavError):
        audio.read_wav(bad)
    hdr = b"RIFF" + struct.pack("<I", 36 + 4) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 24000, 3, 24) + b"data" + struct.pack("<I", 3) + b"\0\0\0\0"
    p24 = tmp_path / "p24.wav"
    p24.write_bytes(hdr)
    with pytest.raises(audio.UnsupportedCodecError):
        audio.read_wav(p24)
    with pytest.raises(ValueError, match="empty waveform"):
        audio.write_wav(Waveform(np.zeros(0), 8000), tmp_path / "e.wav")


def test_write_clips_with_warning(tmp_path, caplog):
    p = tmp_path / "c.wav"
    audio.write_wav(Waveform(np.array([2.0, -3.0, 0.5]), 8000), p)
    assert "clipping" in caplog.text
    assert np.allclose(audio.read_wav(p).samples, [1, -1, 0.5], atol=1 / 32768)


def test_write_is_deterministic(tmp_path):
    spec = SynthSpec(events=[Event("whistle", 0.5, 1.0, 6000.0)])
    w, _, _ = audio.synthesize_clip(spec, 3)
    for name in ("a.wav", "b.wav"):
        audio.write_wav(w, tmp_path / name)
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_labels():
    w = Event("whistle", 0.2, 1.0, 6000.0)
    p = Event("porpoise_click_train", 1.0, 1.0, 22000.0)
    assert audio.synthesize_clip(SynthSpec(events=[w]), 0)[1] == (1, 0, 0)
    assert audio.synthesize_clip(SynthSpec(events=[w, p]), 0)[1] == (1, 0, 1)


def test_noise_only_clip():
    w, y, mask = audio.synthesize_clip(SynthSpec(events=[], noise_kind="pink"), 4)
    assert y == (0, 0, 0) and not mask.any()
    assert np.isfinite(w.samples).all()


def test_synthesis_is_deterministic():
    spec = SynthSpec(events=[Event("beluga_click_train", 0.3, 1.0, 14000.0)], noise_kind="vessel_band")
    a = audio.synthesize_clip(spec, 9)
    b = audio.synthesize_clip(spec, 9)
    assert hashlib.sha256(a[0].samples.tobytes()).digest() == hashlib.sha256(b[0].samples.tobytes()).digest()
    assert np.array_equal(a[2], b[2])
    assert not np.array_equal(a[0].samples, audio.synthesize_clip(spec, 10)[0].samples)


def test_snr_monotone():
    ratios = []
    for snr in (-5.0, 0.0, 5.0, 10.0):
        spec = SynthSpec(snr_db=snr, events=[Event("whistle", 0.5, 1.0, 7000.0)])
        x, clean, _ = audio.mix(spec, 2)
        ratios.append(np.sum(clean ** 2) / np.sum((x - clean) ** 2))
    assert all(a < b for a, b in zip(ratios, ratios[1:]))


@pytest.mark.parametrize("ev", [
    Event("whistle", 0.0, 1.0, 31000.0),
    Event("porpoise_click_train", 0.0, 1.0, 40000.0),
    Event("whistle", 2.5, 1.0, 6000.0),
])
def test_invalid_specs(ev):
    with pytest.raises(ValueError):
        audio.synthesize_clip(SynthSpec(events=[ev]), 0)


def test_corpus_records_balanced_and_stable():
    cfg = audio.CorpusConfig(n_train=16, n_val=8, n_test=8, seed=3)
    recs = audio.corpus_records(cfg)
    assert [r.split for r in recs].count("train") == 16
    for split in ("train", "val", "test"):
        joints = [4 * r.label[0] + 2 * r.label[1] + r.label[2] for r in recs if r.split == split]
        assert np.bincount(joints, minlength=8).min() == np.bincount(joints, minlength=8).max()
    assert recs == audio.corpus_records(cfg)


def test_manifest_roundtrip(tmp_path):
    rows = [{k: str(i) for k in audio.MANIFEST_FIELDS} for i in range(3)]
    audio.write_manifest(rows, tmp_path / "m.csv")
    assert audio.read_manifest(tmp_path / "m.csv") == rows
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(audio.MANIFEST_FIELDS)
