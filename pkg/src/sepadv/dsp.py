"""Linear time-frequency transforms with exact adjoints.

``stft`` and ``istft`` are both real-linear maps between time signals and
one-sided complex spectrograms. Their adjoints, taken with respect to the
real inner product ``sum(Re a * Re b + Im a * Im b)``, are what carries
gradients across the time/frequency boundary in the attacks and in the
frequency-domain model.

Center padding uses zeros, so every operator here is linear (reflect padding
would not change that, but would make the adjoints messier).
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import rng
from .audio_io import AudioClip
from .errors import ParameterError


def hann(n):
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 128
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ParameterError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.hop < 1 or self.hop >= self.n_fft or self.n_fft % self.hop:
            raise ParameterError(f"hop {self.hop} must divide n_fft {self.n_fft} and be smaller")
        if self.window != "hann":
            raise ParameterError(f"unsupported window {self.window!r}")
        if not satisfies_cola(self.window_array(), self.hop):
            raise ParameterError(f"window does not satisfy COLA at hop {self.hop}")

    @property
    def bins(self):
        return self.n_fft // 2 + 1

    def window_array(self):
        return hann(self.n_fft)

    def pad(self):
        return self.n_fft // 2 if self.center else 0

    def num_frames(self, length):
        padded = length + 2 * self.pad()
        if padded < self.n_fft:
            raise ParameterError(
                f"signal of {length} samples is shorter than n_fft={self.n_fft}"
            )
        return 1 + -(-(padded - self.n_fft) // self.hop)

    def to_dict(self):
        return {"n_fft": self.n_fft, "hop": self.hop, "window": self.window, "center": self.center}


def satisfies_cola(window, hop):
    n = len(window)
    acc = np.zeros(hop)
    for start in range(0, n, hop):
        acc += window[start:start + hop]
    return np.allclose(acc, acc[0], rtol=1e-10, atol=1e-12) and acc[0] > 0


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """One-sided complex STFT, ``frames[channel, frame, bin]``."""

    frames: np.ndarray
    config: StftConfig
    origin_length: int
    sample_rate: int = 8000

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 3 or frames.shape[2] != self.config.bins:
            raise ParameterError(
                f"expected [channels, frames, {self.config.bins}] array, got {frames.shape}"
            )
        if frames.shape[1] != self.config.num_frames(self.origin_length):
            raise ParameterError("frame count inconsistent with origin length")
        if not np.all(np.isfinite(frames)):
            raise ParameterError("spectrogram contains NaN or Inf")
        object.__setattr__(self, "frames", frames)

    @property
    def magnitude(self):
        return np.abs(self.frames)

    def with_frames(self, frames):
        return Spectrogram(frames, self.config, self.origin_length, self.sample_rate)


# --------------------------------------------------------------------------
# Array-level kernels. ``signal`` is (..., length), spectra are (..., frames, bins).
# --------------------------------------------------------------------------


def _layout(cfg, length):
    frames = cfg.num_frames(length)
    total = (frames - 1) * cfg.hop + cfg.n_fft
    return frames, total


def _frame_index(cfg, frames):
    return np.arange(frames)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]


def _overlap_add(chunks, cfg, total):
    """Sum ``chunks[..., frame, n_fft]`` into a ``(..., total)`` signal."""
    lead = chunks.shape[:-2]
    frames = chunks.shape[-2]
    out = np.zeros(lead + (total,))
    ratio = cfg.n_fft // cfg.hop
    # hop divides n_fft: add each hop-sized block group with a vectorized reshape
    blocks = chunks.reshape(lead + (frames, ratio, cfg.hop))
    for r in range(ratio):
        seg = blocks[..., r, :].reshape(lead + (frames * cfg.hop,))
        out[..., r * cfg.hop:r * cfg.hop + frames * cfg.hop] += seg
    return out


def _window_envelope(cfg, length):
    frames, total = _layout(cfg, length)
    w2 = np.broadcast_to(cfg.window_array() ** 2, (frames, cfg.n_fft))
    env = _overlap_add(np.ascontiguousarray(w2), cfg, total)
    p = cfg.pad()
    return env[p:p + length]


def stft_array(signal, cfg):
    signal = np.asarray(signal, dtype=np.float64)
    length = signal.shape[-1]
    frames, total = _layout(cfg, length)
    p = cfg.pad()
    padded = np.zeros(signal.shape[:-1] + (total,))
    padded[..., p:p + length] = signal
    chunks = padded[..., _frame_index(cfg, frames)] * cfg.window_array()
    return np.fft.rfft(chunks, axis=-1)


def stft_adjoint_array(cotangent, cfg, length):
    cot = np.asarray(cotangent, dtype=np.complex128)
    frames, total = _layout(cfg, length)
    if cot.shape[-2:] != (frames, cfg.bins):
        raise ParameterError(f"cotangent shape {cot.shape} does not match signal length {length}")
    weighted = cot.copy()
    weighted[..., 1:-1] *= 0.5
    chunks = cfg.n_fft * np.fft.irfft(weighted, n=cfg.n_fft, axis=-1) * cfg.window_array()
    padded = _overlap_add(chunks, cfg, total)
    p = cfg.pad()
    return padded[..., p:p + length]


def istft_array(spec, cfg, length):
    spec = np.asarray(spec, dtype=np.complex128)
    frames, total = _layout(cfg, length)
    if spec.shape[-2:] != (frames, cfg.bins):
        raise ParameterError(f"spectrogram shape {spec.shape} does not match length {length}")
    chunks = np.fft.irfft(spec, n=cfg.n_fft, axis=-1) * cfg.window_array()
    p = cfg.pad()
    out = _overlap_add(chunks, cfg, total)[..., p:p + length]
    env = _window_envelope(cfg, length)
    return np.where(env > 1e-12, out / np.where(env > 1e-12, env, 1.0), 0.0)


def istft_adjoint_array(cotangent, cfg, length):
    """Adjoint of :func:`istft_array`: time cotangent -> spectral cotangent."""
    cot = np.asarray(cotangent, dtype=np.float64)
    frames, total = _layout(cfg, length)
    env = _window_envelope(cfg, length)
    scaled = np.where(env > 1e-12, cot / np.where(env > 1e-12, env, 1.0), 0.0)
    p = cfg.pad()
    padded = np.zeros(cot.shape[:-1] + (total,))
    padded[..., p:p + length] = scaled
    chunks = padded[..., _frame_index(cfg, frames)] * cfg.window_array()
    spec = np.fft.rfft(chunks, axis=-1) * (2.0 / cfg.n_fft)
    spec[..., 0] *= 0.5
    spec[..., -1] *= 0.5
    return spec


# --------------------------------------------------------------------------
# Clip-level operations
# --------------------------------------------------------------------------


def stft(clip, cfg=StftConfig()):
    """Short-time Fourier transform of every channel of ``clip``."""
    frames = stft_array(clip.samples, cfg)
    return Spectrogram(frames, cfg, clip.num_samples, clip.sample_rate)


def istft(spec, cfg=None):
    """Inverse STFT by window-squared-normalized overlap-add."""
    if cfg is not None and cfg != spec.config:
        raise ParameterError(f"config mismatch: {cfg} vs {spec.config}")
    samples = istft_array(spec.frames, spec.config, spec.origin_length)
    return AudioClip(samples, spec.sample_rate)


def stft_adjoint(cotangent, cfg, length):
    """Exact adjoint of :func:`stft` under the real inner product.

    Satisfies ``inner(stft(u), v) == inner(u, stft_adjoint(v))`` for all
    time signals ``u`` and spectrograms ``v``.
    """
    frames = cotangent.frames if isinstance(cotangent, Spectrogram) else cotangent
    rate = cotangent.sample_rate if isinstance(cotangent, Spectrogram) else 8000
    if not np.all(np.isfinite(frames)):
        raise ParameterError("cotangent contains NaN or Inf")
    return AudioClip(stft_adjoint_array(frames, cfg, length), rate)


def real_inner(a, b):
    """Real inner product treating complex entries as (Re, Im) pairs."""
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.sum(a.real * b.real) + np.sum(a.imag * b.imag))


def spectral_convergence(target_mag, signal, cfg):
    denom = np.linalg.norm(target_mag)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(np.abs(stft_array(signal, cfg)) - target_mag) / denom)


def griffin_lim(magnitude, cfg, iters, seed=0, length=None, init_phase=None,
                sample_rate=8000, return_trace=False):
    """Recover a time signal whose STFT magnitude approximates ``magnitude``.

    Parameters
    ----------
    magnitude : ndarray
        Non-negative ``(channels, frames, bins)`` (or ``(frames, bins)``) array.
    cfg : StftConfig
    iters : int
        Number of istft -> stft -> magnitude-replacement rounds.
    seed : int
        Seed for the uniform random initial phase.
    length : int, optional
        Output length; defaults to the longest length consistent with the
        frame count.
    init_phase : ndarray, optional
        Initial phase (radians) overriding the random initialization.
    return_trace : bool
        Also return the spectral-convergence error after every iteration.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    if mag.ndim == 2:
        mag = mag[np.newaxis]
    if np.any(mag < 0) or not np.all(np.isfinite(mag)):
        raise ParameterError("magnitude must be finite and non-negative")
    if iters < 1:
        raise ParameterError("iters must be at least 1")
    frames = mag.shape[1]
    if length is None:
        length = (frames - 1) * cfg.hop + cfg.n_fft - 2 * cfg.pad()
    if cfg.num_frames(length) != frames:
        raise ParameterError(f"length {length} inconsistent with {frames} frames")

    if init_phase is None:
        init_phase = rng.stream(seed, "griffin_lim").uniform(-np.pi, np.pi, mag.shape)
    spec = mag * np.exp(1j * np.asarray(init_phase))
    trace = []
    signal = istft_array(spec, cfg, length)
    for _ in range(iters):
        rebuilt = stft_array(signal, cfg)
        spec = mag * np.exp(1j * np.angle(rebuilt))
        signal = istft_array(spec, cfg, length)
        if return_trace:
            trace.append(spectral_convergence(mag, signal, cfg))
    clip = AudioClip(signal, sample_rate)
    return (clip, trace) if return_trace else clip


# --------------------------------------------------------------------------
# Patch-wise norms
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchNorms:
    values: np.ndarray
    patch_length: int

    def __len__(self):
        return len(self.values)


def patch_l2_norms_array(samples, length):
    """l2 norm of every ``length``-sample patch, pooled over channels.

    Computed as average pooling of squared samples followed by
    ``sqrt(mean * count)``; the trailing partial patch is kept.
    """
    if length < 1:
        raise ParameterError(f"patch length must be >= 1, got {length}")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    num = samples.shape[-1]
    patches = -(-num // length)
    padded = np.zeros((samples.shape[0], patches * length))
    padded[:, :num] = samples
    pooled = (padded ** 2).reshape(samples.shape[0], patches, length).mean(axis=(0, 2))
    return np.sqrt(pooled * length * samples.shape[0])


def patch_l2_norms(clip, length):
    samples = clip.samples if isinstance(clip, AudioClip) else clip
    return PatchNorms(patch_l2_norms_array(samples, length), int(length))


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


def export_spectrogram_csv(spec, path_prefix):
    """Write one CSV of dB magnitudes per channel (rows frames, columns bins).

    Returns the list of written paths, ``{path_prefix}_ch{c}.csv``.
    """
    db = 20 * np.log10(np.abs(spec.frames) + 1e-10)
    paths = []
    for c in range(db.shape[0]):
        path = f"{path_prefix}_ch{c}.csv"
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in db[c]:
                writer.writerow([f"{v:.6f}" for v in row])
        os.replace(tmp, path)
        paths.append(path)
    return paths
