import struct
import warnings
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sepadv import audio_io
from sepadv.audio_io import AudioClip, SourceSet
from sepadv.errors import FormatError, ParameterError, UnsupportedFormatError


def test_clip_accepts_mono_vector_and_is_read_only():
    clip = AudioClip([0.0, 0.5, -0.5], 8000)
    assert clip.shape == (1, 3)
    assert clip.duration == 3 / 8000
    with pytest.raises(ValueError):
        clip.samples[0, 0] = 1.0


@pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf], [[[0.0]]], []])
def test_clip_rejects_invalid_samples(bad):
    with pytest.raises(ParameterError):
        AudioClip(bad, 8000)


def test_clip_arithmetic_checks_compatibility():
    a = AudioClip(np.ones((1, 4)), 8000)
    assert (a + a).samples.tolist() == [[2.0] * 4]
    with pytest.raises(ParameterError):
        a + AudioClip(np.ones((1, 4)), 16000)
    with pytest.raises(ParameterError):
        a - AudioClip(np.ones((2, 4)), 8000)


def test_source_set_enforces_sum():
    s1 = AudioClip(np.ones((1, 8)), 8000)
    s2 = AudioClip(np.full((1, 8), 0.5), 8000)
    ok = SourceSet.from_sources(["a", "b"], [s1, s2])
    assert np.allclose(ok.mixture.samples, 1.5)
    assert ok.stacked().shape == (2, 1, 8)
    assert ok.source("b") is s2
    with pytest.raises(ParameterError):
        SourceSet(("a", "b"), (s1, s2), s1)


def test_pcm16_reads_like_stdlib_wave(tmp_path):
    path = tmp_path / "ref.wav"
    ints = np.array([[0, 1, -1, 32767, -32768, 1234]], dtype="<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(ints.tobytes())
    clip = audio_io.read_wav(path)
    assert clip.sample_rate == 8000
    np.testing.assert_array_equal(clip.samples, ints / 32768.0)


def test_pcm16_writes_like_stdlib_wave(tmp_path):
    samples = np.array([[0.0, 0.25, -0.25], [0.5, -1.0, 0.999]])
    path = tmp_path / "out.wav"
    meta = audio_io.write_wav(AudioClip(samples, 16000), path, "pcm16")
    assert meta == {"encoding": "pcm16", "clipped": False, "num_clipped": 0}
    with wave.open(str(path), "rb") as w:
        assert (w.getnchannels(), w.getsampwidth(), w.getframerate()) == (2, 2, 16000)
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").reshape(-1, 2).T
    np.testing.assert_array_equal(raw, np.rint(samples * 32768).clip(-32768, 32767))


def test_pcm16_clipping_is_reported(tmp_path):
    clip = AudioClip([[1.5, -2.0, 0.0]], 8000)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        meta = audio_io.write_wav(clip, tmp_path / "c.wav", "pcm16")
    assert meta["clipped"] and meta["num_clipped"] == 2
    assert caught
    back = audio_io.read_wav(tmp_path / "c.wav").samples
    np.testing.assert_array_equal(back, [[32767 / 32768, -1.0, 0.0]])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 50)),
              elements=st.floats(-4, 4, width=32)))
def test_float32_round_trip_is_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("wav") / "f.wav"
    clip = AudioClip(data.astype(np.float64), 22050)
    audio_io.write_wav(clip, path, "float32")
    assert audio_io.read_wav(path) == clip


def _riff(chunks):
    body = b"WAVE" + b"".join(cid + struct.pack("<I", len(data)) + data for cid, data in chunks)
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_extensible_float_is_supported(tmp_path):
    fmt = struct.pack("<HHIIHH", 0xFFFE, 1, 8000, 32000, 4, 32)
    fmt += struct.pack("<HHIH", 22, 32, 4, 3) + b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"
    data = np.array([0.5, -0.25], dtype="<f4").tobytes()
    path = tmp_path / "ext.wav"
    path.write_bytes(_riff([(b"fmt ", fmt), (b"data", data)]))
    np.testing.assert_array_equal(audio_io.read_wav(path).samples, [[0.5, -0.25]])


def test_unsupported_and_malformed_files(tmp_path):
    pcm24 = struct.pack("<HHIIHH", 1, 1, 8000, 24000, 3, 24)
    p = tmp_path / "p24.wav"
    p.write_bytes(_riff([(b"fmt ", pcm24), (b"data", b"\x00" * 6)]))
    with pytest.raises(UnsupportedFormatError):
        audio_io.read_wav(p)

    good = _riff([(b"fmt ", struct.pack("<HHIIHH", 1, 1, 8000, 16000, 2, 16)),
                  (b"data", b"\x00\x01" * 8)])
    trunc = tmp_path / "trunc.wav"
    trunc.write_bytes(good[:-5])
    with pytest.raises(FormatError, match="declares"):
        audio_io.read_wav(trunc)

    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"not a wav file at all")
    with pytest.raises(FormatError):
        audio_io.read_wav(junk)

    nodata = tmp_path / "nodata.wav"
    nodata.write_bytes(_riff([(b"fmt ", struct.pack("<HHIIHH", 1, 1, 8000, 16000, 2, 16))]))
    with pytest.raises(FormatError, match="data"):
        audio_io.read_wav(nodata)


def test_unknown_encoding_rejected(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        audio_io.write_wav(AudioClip([0.0], 8000), tmp_path / "x.wav", "mp3")


def test_synth_is_deterministic_and_respects_recipe():
    rec = audio_io.default_recipe(("vocals", "bass", "drums", "other"), duration_s=0.5,
                                  leading_silence_s=0.125, channels=2)
    a = audio_io.synth_source_set(rec, 9)
    b = audio_io.synth_source_set(rec, 9)
    c = audio_io.synth_source_set(rec, 10)
    assert a.names == ("vocals", "bass", "drums", "other")
    assert a.mixture.shape == (2, 4000)
    assert all(x == y for x, y in zip(a.clips, b.clips))
    assert not np.array_equal(a.mixture.samples, c.mixture.samples)
    assert not np.any(a.mixture.samples[:, :1000])
    assert np.all(np.abs(a.mixture.samples[:, 1000:]).max(axis=1) > 0)


def test_synth_sources_are_independent_streams():
    # adding a source must not change the earlier ones
    two = audio_io.synth_source_set(audio_io.default_recipe(("vocals", "bass"), duration_s=0.1), 3)
    three = audio_io.synth_source_set(
        audio_io.default_recipe(("vocals", "bass", "other"), duration_s=0.1), 3)
    assert two.clips[0] == three.clips[0] and two.clips[1] == three.clips[1]


def test_bass_and_vocals_occupy_different_bands():
    s = audio_io.synth_source_set(audio_io.default_recipe(("vocals", "bass"), duration_s=1.0), 1)
    freqs = np.fft.rfftfreq(8000, 1 / 8000)
    for clip, lo, hi in ((s.source("vocals"), 250, 4000), (s.source("bass"), 0, 250)):
        power = np.abs(np.fft.rfft(clip.samples[0])) ** 2
        band = power[(freqs >= lo) & (freqs < hi)].sum()
        assert band / power.sum() > 0.99


def test_recipe_round_trip_and_validation():
    rec = audio_io.SynthRecipe.from_dict({
        "sources": [{"name": "v", "kind": "vocals-like", "params": {"amplitude": 0.2}},
                    {"name": "o", "kind": "broadband"}],
        "duration_s": 0.5,
    })
    assert rec.sources[0].kind == "harmonic_chirp"
    assert audio_io.SynthRecipe.from_dict(rec.to_dict()) == rec
    with pytest.raises(ParameterError):
        audio_io.SynthRecipe.from_dict({"sources": [{"name": "v", "kind": "vocals"}]})
    with pytest.raises(ParameterError):
        audio_io.SynthRecipe.from_dict({"sources": rec.to_dict()["sources"], "bogus": 1})
    with pytest.raises(ParameterError):
        audio_io.SourceSpec("x", "kazoo")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "f.bin"
    audio_io.atomic_write_bytes(target, b"abc")
    audio_io.atomic_write_bytes(target, b"defg")
    assert target.read_bytes() == b"defg"
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]
