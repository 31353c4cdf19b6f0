"""Fixed-length silence-clip preparation from a noise corpus."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import read_wav, resample, write_wav

log = logging.getLogger(__name__)

SILENCE_LABEL = "_silence"
PHASES = ("train", "test")


@dataclass(frozen=True)
class NoiseClipJob:
    """One clipping run over the sources named in a split list.

    The split list assigns every usable noise recording to exactly one
    phase: each line is ``<path relative to noise_root> <train|test>``.
    Keeping the assignment in a reviewed file, rather than re-rolling it per
    run, is what guarantees train and test clips never share a source.
    """

    noise_root: str
    split_path: str
    out_dir: str
    clip_seconds: float = 1.0
    per_file: int = 1
    seed: int = 0
    rate: int = 16000


@dataclass(frozen=True)
class NoiseClipResult:
    written: dict
    skipped: int
    clip_samples: int


def load_split_list(path):
    """Parse the source-to-phase assignment, rejecting ambiguity."""
    assignment = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            source, _, phase = line.strip().rpartition(" ")
            source = source.strip()
            if not source or phase not in PHASES:
                raise ValueError(
                    f"{path} line {lineno}: expected '<path> <train|test>', "
                    f"got {line.strip()!r}")
            if source in assignment:
                raise ValueError(
                    f"{path} line {lineno}: {source!r} assigned twice")
            assignment[source] = phase
    if not assignment:
        raise ValueError(f"{path}: split list is empty")
    return assignment


def clip_noise_segments(job):
    """Cut seeded fixed-length clips from every source and write a manifest.

    Offsets are drawn from one generator in sorted-source order, so a seed
    pins the whole run. Sources shorter than the clip length are skipped
    with a warning. Clips land under ``<out_dir>/<phase>/_silence/`` so each
    phase directory is directly usable as an extraction corpus root.
    """
    if job.per_file < 1:
        raise ValueError("per_file must be >= 1")
    clip_samples = int(round(job.clip_seconds * job.rate))
    if clip_samples < 1:
        raise ValueError("clip length must cover at least one sample")
    assignment = load_split_list(job.split_path)
    rng = np.random.default_rng(job.seed)
    out_root = Path(job.out_dir)
    written = {phase: 0 for phase in PHASES}
    skipped = 0
    manifest = [f"kwsclips v1 rate={job.rate} samples={clip_samples}"]
    for source in sorted(assignment):
        phase = assignment[source]
        samples, rate = read_wav(Path(job.noise_root) / source)
        samples = resample(samples, rate, job.rate)
        if samples.shape[0] < clip_samples:
            log.warning("skipping %s: %d samples < clip length %d",
                        source, samples.shape[0], clip_samples)
            skipped += 1
            continue
        offsets = rng.integers(0, samples.shape[0] - clip_samples + 1,
                               size=job.per_file)
        stem = source.removesuffix(".wav").replace("/", "__")
        clip_dir = out_root / phase / SILENCE_LABEL
        clip_dir.mkdir(parents=True, exist_ok=True)
        for j, offset in enumerate(offsets):
            clip_name = f"{stem}_{j:03d}.wav"
            write_wav(clip_dir / clip_name,
                      samples[offset:offset + clip_samples], job.rate)
            manifest.append(f"{phase}/{SILENCE_LABEL}/{clip_name}"
                            f"\t{source}\t{int(offset)}\t{phase}")
            written[phase] += 1
    if not any(written.values()):
        raise RuntimeError("no source was long enough to clip")
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "manifest.tsv", "w", encoding="ascii") as fh:
        fh.write("\n".join(manifest) + "\n")
    return NoiseClipResult(written=written, skipped=skipped,
                           clip_samples=clip_samples)
