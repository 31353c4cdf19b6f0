"""WAV reading, writing, and resampling for mono PCM utterances."""

import math
import wave

import numpy as np
from scipy.signal import resample_poly

_PCM_SCALE = {1: 127.0, 2: 32767.0, 4: 2147483647.0}
_PCM_DTYPE = {1: np.uint8, 2: np.int16, 4: np.int32}


class AudioReadError(Exception):
    """An audio file cannot be decoded as mono integer-PCM WAV."""


def read_wav(path):
    """Decode a mono PCM WAV file to float64 samples in [-1, 1].

    Returns ``(samples, rate)``. Stereo files, compressed encodings, and
    unsupported sample widths are rejected rather than silently mixed down,
    since channel handling would change the extracted features.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioReadError(f"{path}: {exc}") from exc
    if channels != 1:
        raise AudioReadError(f"{path}: expected mono audio, got {channels} channels")
    if width not in _PCM_DTYPE:
        raise AudioReadError(f"{path}: unsupported sample width {width}")
    if n == 0:
        raise AudioReadError(f"{path}: no audio frames")
    samples = np.frombuffer(raw, dtype=_PCM_DTYPE[width]).astype(np.float64)
    if width == 1:
        samples -= 128.0
    return samples / _PCM_SCALE[width], rate


def write_wav(path, samples, rate):
    """Write float samples in [-1, 1] as 16-bit mono PCM."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(rate))
        fh.writeframes(pcm.tobytes())


def resample(samples, rate, target_rate):
    """Polyphase-resample to ``target_rate``; identity when rates match."""
    if rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    g = math.gcd(int(rate), int(target_rate))
    return resample_poly(samples, target_rate // g, rate // g)
