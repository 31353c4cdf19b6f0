"""Command-line surface: ``kwsextract extract`` and ``kwsextract clip-noise``."""

import argparse
import logging
import sys

from .audio import AudioReadError
from .encoders import UnsupportedModelError
from .extract import ExtractionJob, extract_pooled_features
from .noise import NoiseClipJob, clip_noise_segments


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="kwsextract",
        description="Pooled-feature extraction and noise-clip preparation")
    sub = parser.add_subparsers(dest="command", required=True)

    ext = sub.add_parser("extract",
                         help="pool encoder hidden states over a corpus")
    ext.add_argument("--model", required=True,
                     help="<family>/<checkpoint>, family one of "
                          "wav2vec2, hubert, wavlm")
    ext.add_argument("--audio", required=True,
                     help="corpus root with one subdirectory per label")
    ext.add_argument("--out", required=True, help="pooled feature file to write")
    ext.add_argument("--device", default="cpu")

    clip = sub.add_parser("clip-noise",
                          help="cut fixed-length silence clips from noise files")
    clip.add_argument("--noise", required=True, help="noise corpus root")
    clip.add_argument("--split", required=True,
                      help="file of '<path> <train|test>' source assignments")
    clip.add_argument("--out", required=True, help="output directory")
    clip.add_argument("--len", type=float, default=1.0, dest="clip_seconds",
                      help="clip length in seconds (default 1.0)")
    clip.add_argument("--per-file", type=int, default=1,
                      help="clips per source file (default 1)")
    clip.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_extract(args):
    job = ExtractionJob(audio_root=args.audio, model=args.model,
                        out_path=args.out, device=args.device)
    result = extract_pooled_features(job)
    print(f"wrote {result.written} utterances "
          f"(L={result.num_layers} d={result.hidden_dim}, "
          f"{result.skipped} skipped) to {args.out}")
    return 0


def _cmd_clip_noise(args):
    job = NoiseClipJob(noise_root=args.noise, split_path=args.split,
                       out_dir=args.out, clip_seconds=args.clip_seconds,
                       per_file=args.per_file, seed=args.seed)
    result = clip_noise_segments(job)
    counts = " ".join(f"{phase}={n}" for phase, n in sorted(result.written.items()))
    print(f"wrote {counts} clips of {result.clip_samples} samples "
          f"({result.skipped} sources skipped) under {args.out}")
    return 0


_COMMANDS = {"extract": _cmd_extract, "clip-noise": _cmd_clip_noise}


def main(argv=None):
    logging.basicConfig(format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UnsupportedModelError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (AudioReadError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
