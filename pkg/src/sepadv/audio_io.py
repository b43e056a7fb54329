"""Audio containers, WAV reading/writing and synthetic multi-source material.

Samples are stored channel-major, ``samples[channel, time]``, as float64.
WAV files are RIFF little-endian with either 16-bit PCM (format tag 1) or
32-bit IEEE float (format tag 3) payloads.
"""

import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import FormatError, ParameterError, UnsupportedFormatError

PCM16_SCALE = 32768.0

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Immutable multichannel time-domain signal.

    Parameters
    ----------
    samples : array_like
        ``(channels, num_samples)`` array, or a 1-D array for mono.
    sample_rate : int
        Sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.array(self.samples, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ParameterError(f"samples must be 1-D or 2-D, got {data.ndim}-D")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ParameterError(f"empty clip of shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("clip contains NaN or Inf samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ParameterError(f"invalid sample rate {self.sample_rate!r}")
        data.setflags(write=False)
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def num_samples(self):
        return self.samples.shape[1]

    @property
    def shape(self):
        return self.samples.shape

    @property
    def duration(self):
        return self.num_samples / self.sample_rate

    def with_samples(self, samples):
        """Return a clip with the same rate holding ``samples``."""
        return AudioClip(samples, self.sample_rate)

    def __add__(self, other):
        _check_compatible(self, other)
        return AudioClip(self.samples + other.samples, self.sample_rate)

    def __sub__(self, other):
        _check_compatible(self, other)
        return AudioClip(self.samples - other.samples, self.sample_rate)

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.shape == other.shape
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"AudioClip(channels={self.channels}, num_samples={self.num_samples}, "
            f"sample_rate={self.sample_rate})"
        )


def _check_compatible(a, b):
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.sample_rate != b.sample_rate:
        raise ParameterError(f"sample rate mismatch: {a.sample_rate} vs {b.sample_rate}")


def zeros_like(clip):
    return AudioClip(np.zeros(clip.shape), clip.sample_rate)


@dataclass(frozen=True)
class SourceSet:
    """Named source clips plus their mixture (the elementwise sum)."""

    names: tuple
    clips: tuple
    mixture: AudioClip

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "clips", tuple(self.clips))
        if len(self.names) != len(self.clips) or not self.clips:
            raise ParameterError("a SourceSet needs one name per clip and at least one clip")
        for clip in self.clips:
            _check_compatible(clip, self.mixture)
        total = np.sum([c.samples for c in self.clips], axis=0)
        if np.max(np.abs(total - self.mixture.samples)) > 1e-6:
            raise ParameterError("mixture is not the sum of the sources")

    @classmethod
    def from_sources(cls, names, clips):
        mixture = AudioClip(np.sum([c.samples for c in clips], axis=0), clips[0].sample_rate)
        return cls(tuple(names), tuple(clips), mixture)

    def __len__(self):
        return len(self.clips)

    def index(self, name):
        return self.names.index(name)

    def source(self, key):
        if isinstance(key, str):
            key = self.index(key)
        return self.clips[key]

    def stacked(self):
        """Sources as one ``(num_sources, channels, num_samples)`` array."""
        return np.stack([c.samples for c in self.clips])


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------


def read_wav(path):
    """Read a PCM16 or float32 RIFF/WAVE file into an :class:`AudioClip`.

    PCM16 samples are divided by 32768; float32 samples pass through unchanged.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(
                f"{path}: chunk {chunk_id!r} declares {size} bytes, only {len(body)} present"
            )
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                (subformat,) = struct.unpack_from("<H", body, 24)
                fmt = (subformat,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if payload is None:
        raise FormatError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise FormatError(f"{path}: invalid channel count or sample rate")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), PCM16_SCALE
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), None
    else:
        raise UnsupportedFormatError(
            f"{path}: unsupported encoding (format tag {tag}, {bits} bits)"
        )
    frame_bytes = channels * dtype.itemsize
    if block_align != frame_bytes or len(payload) % frame_bytes:
        raise FormatError(f"{path}: data chunk is not a whole number of frames")
    if not payload:
        raise FormatError(f"{path}: empty data chunk")

    frames = np.frombuffer(payload, dtype=dtype).reshape(-1, channels).T
    samples = frames.astype(np.float64)
    if scale is not None:
        samples /= scale
    return AudioClip(samples, rate)


def write_wav(clip, path, encoding="float32"):
    """Write ``clip`` to ``path``; returns metadata about the conversion.

    For ``pcm16`` samples outside [-1, 1] are clamped (a warning is issued and
    ``clipped`` is set in the returned dict) and values are rounded to the
    nearest integer after scaling by 32768. The file is written atomically.
    """
    samples = clip.samples
    meta = {"encoding": encoding, "clipped": False, "num_clipped": 0}
    if encoding == "pcm16":
        scaled = np.rint(samples * PCM16_SCALE)
        over = (scaled > 32767) | (scaled < -32768)
        if np.any(over):
            meta["clipped"] = True
            meta["num_clipped"] = int(np.count_nonzero(over))
            warnings.warn(
                f"{meta['num_clipped']} samples clamped to the PCM16 range", stacklevel=2
            )
        frames = np.clip(scaled, -32768, 32767).astype("<i2")
        tag, bits = WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        frames = samples.astype("<f4")
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise UnsupportedFormatError(f"unsupported encoding {encoding!r}")

    channels = clip.channels
    block_align = channels * bits // 8
    payload = np.ascontiguousarray(frames.T).tobytes()
    fmt = struct.pack(
        "<HHIIHH", tag, channels, clip.sample_rate,
        clip.sample_rate * block_align, block_align, bits,
    )
    chunks = [b"fmt ", struct.pack("<I", len(fmt)), fmt]
    if tag == WAVE_FORMAT_IEEE_FLOAT:
        # non-PCM formats carry a fact chunk with the frame count
        chunks += [b"fact", struct.pack("<II", 4, clip.num_samples)]
    chunks += [b"data", struct.pack("<I", len(payload)), payload]
    if len(payload) & 1:
        chunks.append(b"\x00")
    body = b"WAVE" + b"".join(chunks)
    atomic_write_bytes(path, b"RIFF" + struct.pack("<I", len(body)) + body)
    return meta


def atomic_write_bytes(path, data):
    """Write ``data`` to a temporary file next to ``path`` and rename it."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Synthetic material
# --------------------------------------------------------------------------

SOURCE_KINDS = ("harmonic_chirp", "low_sine", "filtered_noise", "broadband")

_KIND_ALIASES = {
    "vocals": "harmonic_chirp",
    "vocals-like": "harmonic_chirp",
    "bass": "low_sine",
    "bass-like": "low_sine",
    "drums": "filtered_noise",
    "drums-like": "filtered_noise",
    "other": "broadband",
    "other-like": "broadband",
}


@dataclass(frozen=True)
class SourceSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        if kind not in SOURCE_KINDS:
            raise ParameterError(f"unknown source kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", dict(self.params))


@dataclass(frozen=True)
class SynthRecipe:
    """Description of a synthetic source set (JSON-shaped)."""

    sources: tuple
    duration_s: float = 4.0
    sample_rate: int = 8000
    leading_silence_s: float = 0.0
    channels: int = 1

    def __post_init__(self):
        specs = tuple(s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources)
        object.__setattr__(self, "sources", specs)
        if len(specs) < 2:
            raise ParameterError("a recipe needs at least two sources")
        if self.duration_s <= 0:
            raise ParameterError(f"duration must be positive, got {self.duration_s}")
        if self.sample_rate <= 0 or self.channels < 1:
            raise ParameterError("sample_rate and channels must be positive")
        if not 0 <= self.leading_silence_s < self.duration_s:
            raise ParameterError("leading silence must lie inside the clip")

    @classmethod
    def from_dict(cls, d):
        known = {"sources", "duration_s", "sample_rate", "leading_silence_s", "channels"}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown recipe fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return {
            "sources": [
                {"name": s.name, "kind": s.kind, "params": dict(s.params)} for s in self.sources
            ],
            "duration_s": self.duration_s,
            "sample_rate": self.sample_rate,
            "leading_silence_s": self.leading_silence_s,
            "channels": self.channels,
        }


def default_recipe(kinds=("vocals", "bass"), **kwargs):
    return SynthRecipe(
        sources=tuple(SourceSpec(k, k) for k in kinds), **kwargs
    )


def _harmonic_chirp(t, gen, p):
    f_start = p.get("f_start", gen.uniform(280.0, 360.0))
    f_end = p.get("f_end", f_start * gen.uniform(1.3, 1.8))
    harmonics = int(p.get("harmonics", 4))
    vibrato_hz = p.get("vibrato_hz", gen.uniform(4.0, 6.0))
    vibrato_depth = p.get("vibrato_depth", 0.02)
    syllable_hz = p.get("syllable_hz", gen.uniform(1.5, 3.0))
    duration = max(t[-1], 1e-9)
    f0 = f_start * (f_end / f_start) ** (t / duration)
    f0 = f0 * (1.0 + vibrato_depth * np.sin(2 * np.pi * vibrato_hz * t))
    phase = 2 * np.pi * np.cumsum(f0) * (t[1] - t[0] if len(t) > 1 else 0.0)
    nyquist = 0.5 / (t[1] - t[0]) if len(t) > 1 else np.inf
    wave = np.zeros_like(t)
    for h in range(1, harmonics + 1):
        if h * f_end * (1 + vibrato_depth) < nyquist:
            wave += np.sin(h * phase + gen.uniform(0, 2 * np.pi)) / h
    env = 0.6 + 0.4 * np.sin(2 * np.pi * syllable_hz * t + gen.uniform(0, 2 * np.pi))
    return p.get("amplitude", 0.3) * env * wave / np.max(np.abs(wave) + 1e-12)


def _low_sine(t, gen, p):
    freq = p.get("freq", gen.uniform(55.0, 100.0))
    wave = np.sin(2 * np.pi * freq * t + gen.uniform(0, 2 * np.pi))
    wave += 0.3 * np.sin(4 * np.pi * freq * t + gen.uniform(0, 2 * np.pi))
    return p.get("amplitude", 0.3) * wave / 1.3


def _filtered_noise(t, gen, p):
    rate = p.get("hits_per_s", 2.0)
    decay = p.get("decay_s", 0.05)
    noise = gen.standard_normal(len(t))
    noise = np.diff(noise, prepend=0.0) / 2.0
    phase = (t * rate + gen.uniform(0, 1)) % 1.0
    env = np.exp(-phase / (rate * decay))
    return p.get("amplitude", 0.3) * env * noise / 1.5


def _broadband(t, gen, p):
    noise = gen.standard_normal(len(t))
    taps = int(p.get("smoothing", 1))
    noise = np.convolve(noise, np.ones(taps) / taps, mode="same")
    env = 0.7 + 0.3 * np.sin(2 * np.pi * gen.uniform(0.2, 0.6) * t)
    return p.get("amplitude", 0.1) * env * noise


_GENERATORS = {
    "harmonic_chirp": _harmonic_chirp,
    "low_sine": _low_sine,
    "filtered_noise": _filtered_noise,
    "broadband": _broadband,
}


def synth_source_set(recipe, seed):
    """Generate a deterministic :class:`SourceSet` from ``recipe`` and ``seed``."""
    if isinstance(recipe, dict):
        recipe = SynthRecipe.from_dict(recipe)
    if recipe.duration_s <= 0:
        raise ParameterError(f"duration must be positive, got {recipe.duration_s}")
    sr = recipe.sample_rate
    n = int(round(recipe.duration_s * sr))
    if n < 1:
        raise ParameterError("recipe produces an empty clip")
    t = np.arange(n) / sr
    silent = int(round(recipe.leading_silence_s * sr))

    clips = []
    for i, spec in enumerate(recipe.sources):
        gen = rng.stream(seed, f"synth:{i}:{spec.name}")
        mono = _GENERATORS[spec.kind](t, gen, spec.params)
        gains = 1.0 - 0.2 * gen.random(recipe.channels) if recipe.channels > 1 else np.ones(1)
        samples = gains[:, np.newaxis] * mono[np.newaxis, :]
        samples[:, :silent] = 0.0
        clips.append(AudioClip(samples, sr))
    return SourceSet.from_sources([s.name for s in recipe.sources], clips)
