"""Vocoder compression bench: exact model accounting, bit-faithful numeric
format emulation, magnitude pruning, and desk-scale training."""

__version__ = "0.1.0"

from .audio_io import AudioClip, FeatureMatrix, mulaw_decode, mulaw_encode
from .kernels import PrecisionContext, context_for
from .model import ModelConfig, build, desk_config, forward_teacher_forced, generate
from .numerics import FORMATS, FormatSpec, IntQuantParams, bits_per_value, round_float

__all__ = [
    "__version__",
    "AudioClip",
    "FeatureMatrix",
    "mulaw_encode",
    "mulaw_decode",
    "PrecisionContext",
    "context_for",
    "ModelConfig",
    "desk_config",
    "build",
    "forward_teacher_forced",
    "generate",
    "FORMATS",
    "FormatSpec",
    "IntQuantParams",
    "bits_per_value",
    "round_float",
]
