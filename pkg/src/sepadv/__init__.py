"""Adversarial perturbations against audio source separation models.

Submodules
----------
audio_io  WAV I/O, clips, source sets and synthetic sources
dsp       STFT/ISTFT with exact adjoints, Griffin-Lim, patch norms
models    toy separation models with hand-written VJPs, weight files, training
attacks   gd / fgsm / pgd with l2, sup and STPR constraints
metrics   SDR, SIR, DS/DI/DSA and median-of-medians aggregation
harness   white-box sweeps, transfer studies and untargeted effects
cli       ``sepadv`` command-line front end
"""

from .audio_io import AudioClip, SourceSet, read_wav, write_wav
from .errors import (
    ConfigError,
    FormatError,
    NumericError,
    ParameterError,
    PlanValidationError,
    SepAdvError,
    UndefinedMetricError,
    UnsupportedFormatError,
)

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "SourceSet",
    "read_wav",
    "write_wav",
    "ConfigError",
    "FormatError",
    "NumericError",
    "ParameterError",
    "PlanValidationError",
    "SepAdvError",
    "UndefinedMetricError",
    "UnsupportedFormatError",
]
