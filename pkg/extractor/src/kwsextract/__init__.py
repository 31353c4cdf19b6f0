"""Offline feature extraction for few-shot keyword classification.

Runs pretrained self-supervised speech encoders over an audio corpus,
time-averages every exposed hidden-state layer, and writes the engine's
pooled-feature text format; also clips fixed-length silence segments out
of longer noise recordings.
"""

from .audio import AudioReadError, read_wav, resample, write_wav
from .encoders import Encoder, UnsupportedModelError, load_encoder
from .extract import ExtractionJob, ExtractionResult, extract_pooled_features
from .noise import NoiseClipJob, NoiseClipResult, clip_noise_segments

__all__ = [
    "AudioReadError", "read_wav", "resample", "write_wav",
    "Encoder", "UnsupportedModelError", "load_encoder",
    "ExtractionJob", "ExtractionResult", "extract_pooled_features",
    "NoiseClipJob", "NoiseClipResult", "clip_noise_segments",
]
