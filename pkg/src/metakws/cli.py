"""Command-line surface: data generation, splits, suites, training,
evaluation, embedding dumps, and report summaries.

Exit codes: 0 on success, 2 for usage errors (including invalid option
combinations), 1 for runtime failures.  A `--config` JSON file overrides
any flags it names.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import checkpoint, episodes, features, harness
from .features import ConfigError, DatasetFormatError


def _add_run_flags(p):
    p.add_argument("--algo", required=True, choices=harness.ALL_ALGOS)
    p.add_argument("--encoder", choices=("frozen", "scratch"), default="frozen")
    p.add_argument("--encoder-train", choices=("fixed", "finetune"),
                   default="fixed", dest="encoder_train")
    p.add_argument("--ways", type=int, default=12)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--inner-lr", type=float, default=5e-2, dest="inner_lr")
    p.add_argument("--outer-lr", type=float, default=1e-4, dest="outer_lr")
    p.add_argument("--inner-steps-train", type=int, default=5,
                   dest="steps_train")
    p.add_argument("--inner-steps-test", type=int, default=20,
                   dest="steps_test")
    p.add_argument("--meta-batch", type=int, default=4, dest="meta_batch")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--tasks-per-epoch", type=int, default=1000,
                   dest="tasks_per_epoch")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose keys override flags")


def _run_config(args):
    values = {
        "algo": args.algo, "encoder": args.encoder,
        "encoder_train": args.encoder_train, "n_way": args.ways,
        "k_shot": args.shots, "q_per_class": args.queries,
        "tasks_per_epoch": args.tasks_per_epoch, "inner_lr": args.inner_lr,
        "outer_lr": args.outer_lr, "steps_train": args.steps_train,
        "steps_test": args.steps_test, "meta_batch": args.meta_batch,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "seed": args.seed,
    }
    if args.algo == "scratch":
        values["encoder"] = "scratch"
        values["encoder_train"] = "finetune"
    if args.config:
        with open(args.config, "r", encoding="ascii") as fh:
            values.update(json.load(fh))
    cfg = harness.RunConfig.from_dict(values)
    cfg.validate()
    return cfg


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="metakws",
        description="few-shot keyword classification over pooled or "
                    "frame-level speech features")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--keywords", type=int, default=35)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--sigma-within", type=float, default=1.0)
    p.add_argument("--sigma-between", type=float, default=10.0)
    p.add_argument("--noise-classes", type=int, default=4)
    p.add_argument("--mode", choices=(features.POOLED_MODE,
                                      features.FRAMES_MODE),
                   default=features.POOLED_MODE)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--sigma-frame", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("split", help="derive keyword and utterance splits")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unknown", type=int, default=5)
    p.add_argument("--train-keywords", type=int, default=20)
    p.add_argument("--test-keywords", type=int, default=10)

    p = sub.add_parser("make-suite", help="freeze a deterministic test suite")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", type=int, default=1000)
    p.add_argument("--ways", type=int, default=12)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one system and save a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--quiet", action="store_true")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fixed suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="needed with --resample-supports")
    p.add_argument("--resample-supports", type=int, default=0,
                   dest="resample_supports")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dump-emb", help="write per-utterance embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="summarize a saved evaluation report")
    p.add_argument("--report", required=True)
    return parser


def _cmd_gen_synth(args):
    cfg = features.SynthConfig(
        num_keywords=args.keywords, num_layers=args.layers, dim=args.dim,
        utterances_per_keyword=args.utts, sigma_within=args.sigma_within,
        sigma_between=args.sigma_between, noise_classes=args.noise_classes,
        seed=args.seed, mode=args.mode,
        frames_per_utterance=args.frames, sigma_frame=args.sigma_frame)
    dataset = features.generate_synthetic(cfg)
    features.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.utterances)} utterances to {args.out}")
    return 0


def _cmd_split(args):
    dataset = features.load_dataset(args.data)
    split = episodes.build_splits(
        dataset, seed=args.seed, n_unknown=args.unknown,
        n_train=args.train_keywords, n_test=args.test_keywords)
    episodes.save_split(split, args.out)
    print(f"wrote split ({args.train_keywords} train / {args.test_keywords} "
          f"test / {args.unknown} unknown keywords) to {args.out}")
    return 0


def _cmd_make_suite(args):
    dataset = features.load_dataset(args.data)
    split = episodes.load_split(args.split)
    cfg = episodes.SamplerConfig(n_way=args.ways, k_shot=args.shots,
                                 q_per_class=args.queries)
    suite = episodes.fixed_test_suite(split, args.tasks, cfg, args.seed)
    episodes.save_suite(suite, args.out)
    print(f"wrote {len(suite)} tasks to {args.out}")
    return 0


def _cmd_train(args):
    cfg = _run_config(args)
    dataset = features.load_dataset(args.data)
    split = episodes.load_split(args.split)
    log_fn = None if args.quiet else print
    model, result = harness.train_run(cfg, dataset, split,
                                      checkpoint_dir=args.checkpoint_dir,
                                      log_fn=log_fn)
    metadata = {
        "run_config": cfg.to_dict(),
        "loss_history": result.loss_history,
        "epochs_run": result.epochs_run,
        "converged": result.converged,
    }
    checkpoint.save_checkpoint(args.out, result.params, adam=result.adam,
                               metadata=metadata)
    status = "converged" if result.converged else "epoch budget reached"
    print(f"trained {cfg.algo} for {result.epochs_run} epochs ({status}); "
          f"checkpoint at {args.out}")
    return 0


def _load_run(ckpt_path, data_path):
    params, _, metadata, _ = checkpoint.load_checkpoint(ckpt_path)
    if "run_config" not in metadata:
        raise DatasetFormatError(
            f"{ckpt_path}: checkpoint has no run_config metadata")
    cfg = harness.RunConfig.from_dict(metadata["run_config"])
    cfg.validate()
    dataset = features.load_dataset(data_path)
    model = harness.build_model(cfg, dataset)
    return cfg, dataset, model, params


def _cmd_eval(args):
    cfg, dataset, model, params = _load_run(args.ckpt, args.data)
    suite = episodes.load_suite(args.suite)
    system = harness.build_system(cfg, model, params, dataset)
    if args.resample_supports > 0:
        if not args.split:
            raise ConfigError("--resample-supports needs --split")
        split = episodes.load_split(args.split)
        report = harness.evaluate_suite_resampled(
            system, suite, split, args.resample_supports, args.seed)
    else:
        report = harness.evaluate_suite(system, suite)
    harness.save_report(report, args.out)
    print(f"{cfg.algo}: mean accuracy {report.mean:.4f} "
          f"(std {report.std:.4f}, {report.n_tasks} records) -> {args.out}")
    return 0


def _cmd_dump_emb(args):
    cfg, dataset, model, params = _load_run(args.ckpt, args.data)
    harness.dump_embeddings(model, params, dataset, args.out)
    print(f"wrote embeddings for {len(dataset.utterances)} utterances "
          f"to {args.out}")
    return 0


def _cmd_report(args):
    report = harness.load_report(args.report)
    print(f"algo={report.algo} tasks={report.n_tasks} "
          f"redraws={report.redraws} mean={report.mean:.6f} "
          f"std={report.std:.6f} suite={report.suite_id}")
    return 0


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "split": _cmd_split,
    "make-suite": _cmd_make_suite,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "dump-emb": _cmd_dump_emb,
    "report": _cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, episodes.SamplingError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
