"""Pooled-feature extraction over a per-keyword audio directory tree."""

import logging
from dataclasses import dataclass
from pathlib import Path

from .audio import AudioReadError, read_wav, resample
from .encoders import load_encoder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractionJob:
    """One extraction run: which corpus, which encoder, where to write.

    ``audio_root`` contains one subdirectory per label, each holding WAV
    files; the utterance id is ``<label>/<file stem>``.
    """

    audio_root: str
    model: str
    out_path: str
    device: str = "cpu"


@dataclass(frozen=True)
class ExtractionResult:
    written: int
    skipped: int
    num_layers: int
    hidden_dim: int


def discover_utterances(audio_root):
    """Sorted (utterance id, label, path) triples under the corpus root."""
    root = Path(audio_root)
    if not root.is_dir():
        raise FileNotFoundError(f"audio root {audio_root!r} is not a directory")
    found = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav in sorted(label_dir.glob("*.wav")):
            found.append((f"{label_dir.name}/{wav.stem}", label_dir.name, wav))
    if not found:
        raise FileNotFoundError(
            f"no <label>/<name>.wav files under {audio_root!r}")
    return found


def _fmt(x):
    return f"{x:.17g}"


def extract_pooled_features(job):
    """Pool every utterance through the encoder and write the feature file.

    Each exposed hidden-state layer is averaged over time, giving an
    [L, hidden_dim] matrix per utterance. Unreadable files are skipped with
    a warning and counted; a change of feature dimensions mid-run aborts,
    since mixed shapes would poison the whole file.
    """
    encoder = load_encoder(job.model, device=job.device)
    utterances = discover_utterances(job.audio_root)
    lines = [f"kwsfeat pooled v1 L={encoder.num_layers} d={encoder.hidden_dim}"]
    written = skipped = 0
    for utt_id, label, path in utterances:
        try:
            samples, rate = read_wav(path)
        except AudioReadError as exc:
            log.warning("skipping unreadable audio: %s", exc)
            skipped += 1
            continue
        samples = resample(samples, rate, encoder.target_rate)
        layers = encoder.hidden_layers(samples)
        pooled = layers.mean(axis=1)
        if pooled.shape != (encoder.num_layers, encoder.hidden_dim):
            raise RuntimeError(
                f"{path}: encoder produced {pooled.shape}, expected "
                f"({encoder.num_layers}, {encoder.hidden_dim}); aborting run")
        row = " ".join(_fmt(v) for v in pooled.reshape(-1))
        lines.append(f"{utt_id}\t{label}\t{row}")
        written += 1
    if not written:
        raise RuntimeError(f"no utterance under {job.audio_root!r} was readable")
    with open(job.out_path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return ExtractionResult(written=written, skipped=skipped,
                            num_layers=encoder.num_layers,
                            hidden_dim=encoder.hidden_dim)
