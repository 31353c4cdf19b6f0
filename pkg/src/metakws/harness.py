"""Run configuration, baselines, fixed-suite evaluation, and reporting.

Every trained system (meta-learned, transfer, or scratch) is wrapped in a
small adapter with one method, ``evaluate_episode``, so the suite evaluator
treats them uniformly and all reports carry the suite and config
fingerprints that make results comparable across runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import meta_metric, meta_optim, models, tensor
from .episodes import SamplerConfig, TEST_PHASE, resample_support
from .features import ConfigError, DatasetFormatError, FRAMES_MODE, POOLED_MODE
from .meta_optim import InnerLoopConfig, OuterState, TrainResult
from .tensor import AdamState

OPTIM_ALGOS = ("maml", "anil", "boil", "reptile")
METRIC_ALGOS = ("proto", "matching", "relational")
ALL_ALGOS = OPTIM_ALGOS + METRIC_ALGOS + ("transfer1", "scratch")

FROZEN_ENCODER = "frozen"
SCRATCH_ENCODER = "scratch"


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to train and evaluate one system."""

    algo: str
    encoder: str = FROZEN_ENCODER
    encoder_train: str = "fixed"
    n_way: int = 12
    k_shot: int = 5
    q_per_class: int = 5
    tasks_per_epoch: int = 1000
    inner_lr: float = 5e-2
    outer_lr: float = 1e-4
    steps_train: int = 5
    steps_test: int = 20
    meta_batch: int = 4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    head_hidden: tuple = (64, 64, 64)
    embed_dim: int = 64
    attention_heads: int = 4
    encoder_hidden: tuple = (32,)
    encoder_out: int = 32

    def validate(self):
        if self.algo not in ALL_ALGOS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; "
                              f"choose from {ALL_ALGOS}")
        if self.encoder not in (FROZEN_ENCODER, SCRATCH_ENCODER):
            raise ConfigError(f"unknown encoder mode {self.encoder!r}")
        if self.encoder_train not in ("fixed", "finetune"):
            raise ConfigError(f"unknown encoder_train {self.encoder_train!r}")
        if self.encoder == FROZEN_ENCODER and self.encoder_train == "finetune":
            raise ConfigError(
                "frozen features cannot be fine-tuned: the upstream encoder "
                "is outside this system; use --encoder scratch for a "
                "trainable encoder")
        if self.algo == "boil" and self.encoder_train == "fixed":
            raise ConfigError(
                "boil with a fixed encoder is unsupported: boil adapts only "
                "the encoder side in the inner loop, so no inner-loop update "
                "is possible when the encoder does not train")
        if self.algo == "anil" and self.encoder_train == "fixed":
            raise ConfigError(
                "anil with a fixed encoder is redundant: only the classifier "
                "would adapt anywhere, which is exactly maml in this setting; "
                "use --algo maml")
        if self.algo == "scratch" and self.encoder != SCRATCH_ENCODER:
            raise ConfigError(
                "the scratch baseline trains a randomly initialized encoder; "
                "use --encoder scratch with frame-level features")
        for name in ("n_way", "k_shot", "q_per_class", "meta_batch", "epochs",
                     "tasks_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.steps_train < 0 or self.steps_test < 0:
            raise ConfigError("step counts must be >= 0")

    @property
    def effective_algo(self):
        """The algorithm actually trained; `scratch` is maml over raw frames."""
        return "maml" if self.algo == "scratch" else self.algo

    def trainable_partitions(self):
        parts = {tensor.CLASSIFIER, tensor.LAYER_WEIGHTS}
        if self.encoder == SCRATCH_ENCODER and self.encoder_train == "finetune":
            parts.add(tensor.ENCODER)
        return frozenset(parts)

    def sampler(self):
        return SamplerConfig(n_way=self.n_way, k_shot=self.k_shot,
                             q_per_class=self.q_per_class,
                             tasks_per_epoch=self.tasks_per_epoch)

    def inner(self):
        return InnerLoopConfig(
            variant=self.effective_algo if self.effective_algo in OPTIM_ALGOS
            else "maml",
            inner_lr=self.inner_lr, steps_train=self.steps_train,
            steps_test=self.steps_test)

    def model_config(self, dataset):
        expected = POOLED_MODE if self.encoder == FROZEN_ENCODER else FRAMES_MODE
        if dataset.mode != expected:
            raise ConfigError(
                f"encoder mode {self.encoder!r} needs a {expected!r} dataset, "
                f"got {dataset.mode!r}")
        return models.ModelConfig(
            mode=dataset.mode, num_layers=max(dataset.num_layers, 1),
            feat_dim=dataset.dim, encoder_hidden=tuple(self.encoder_hidden),
            encoder_out=self.encoder_out, head_hidden=tuple(self.head_hidden),
            embed_dim=self.embed_dim, attention_heads=self.attention_heads)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["head_hidden"] = list(self.head_hidden)
        out["encoder_hidden"] = list(self.encoder_hidden)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("head_hidden", "encoder_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def fingerprint(self):
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


def suite_fingerprint(suite):
    """Stable hash of a suite's exact content (same as its file bytes)."""
    lines = []
    first = suite[0]
    lines.append(f"kwssuite v1 N={first.n_way} K={first.k_shot} "
                 f"Q={first.q_per_class} tasks={len(suite)}")
    for ep in suite:
        entries = [f"{ep.class_map[cls]}:{utt}" for utt, cls in ep.support]
        entries.append("|")
        entries.extend(f"{ep.class_map[cls]}:{utt}" for utt, cls in ep.query)
        lines.append("\t".join(entries))
    text = "\n".join(lines) + "\n"
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Systems: uniform episode-evaluation adapters.


class OptimSystem:
    """Meta-learned classifier evaluated by inner-loop adaptation."""

    def __init__(self, model, params, cfg, dataset):
        self.model = model
        self.params = params
        self.cfg = cfg
        self.dataset = dataset

    def evaluate_episode(self, episode, task_index=0):
        return meta_optim.adapt_and_eval(
            self.params, episode, self.cfg.inner(), self.model, self.dataset,
            trainable=self.cfg.trainable_partitions())


class MetricSystem:
    """Metric model evaluated without test-time gradient steps."""

    def __init__(self, model, params, dataset):
        self.model = model
        self.params = params
        self.dataset = dataset

    def evaluate_episode(self, episode, task_index=0):
        _, accuracy = meta_metric.metric_predict(
            self.model, self.params, self.dataset, episode)
        return accuracy


class TransferSystem:
    """Pretrained classifier with a per-task fresh output layer.

    The replacement head for task i is drawn from a stream seeded by
    (head_seed, i), so evaluation is deterministic but heads are independent
    of the pretraining run.
    """

    def __init__(self, model, params, cfg, dataset, head_seed=0):
        self.model = model
        self.params = params
        self.cfg = cfg
        self.dataset = dataset
        self.head_seed = head_seed

    def evaluate_episode(self, episode, task_index=0):
        rng = np.random.default_rng(
            np.random.SeedSequence([self.head_seed, task_index]))
        task_model, task_params = self.model.replace_output_layer(
            self.params, episode.n_way, rng)
        finetune_cfg = InnerLoopConfig(
            variant="maml", inner_lr=self.cfg.inner_lr,
            steps_train=self.cfg.steps_train, steps_test=self.cfg.steps_test)
        return meta_optim.adapt_and_eval(
            task_params, episode, finetune_cfg, task_model, self.dataset,
            trainable=self.cfg.trainable_partitions())


# ---------------------------------------------------------------------------
# Transfer baseline training.


def transfer_pretrain(dataset, split, cfg, log_fn=None):
    """Supervised 20-way pretraining on the meta-train keywords.

    Returns (model, TrainResult).  Minibatches are drawn from the train-phase
    utterances of the meta-train keywords; Adam with the outer learning rate.
    """
    cfg.validate()
    keywords = list(split.meta_train_keywords)
    if len(keywords) != 20:
        raise ConfigError(
            f"the transfer baseline is a 20-way pretraining task; split has "
            f"{len(keywords)} meta-train keywords")
    label_to_idx = {kw: i for i, kw in enumerate(sorted(keywords))}
    ids, labels = [], []
    for kw in sorted(keywords):
        for utt in split.train_utterances[kw]:
            ids.append(utt)
            labels.append(label_to_idx[kw])
    labels = np.array(labels, dtype=np.float64)

    model = models.ClassifierModel(cfg.model_config(dataset), len(keywords))
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, batch_ss = ss.spawn(2)
    params = model.init_params(np.random.default_rng(init_ss))
    adam = AdamState.init(params)
    rng = np.random.default_rng(batch_ss)
    mask = cfg.trainable_partitions()
    graph = model.loss_graph("mean")

    history = []
    epochs_run = 0
    converged = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        losses = []
        for start in range(0, len(ids), cfg.batch_size):
            chosen = order[start:start + cfg.batch_size]
            batch = model.batch_inputs(
                dataset, [ids[i] for i in chosen], labels[chosen])
            loss = tensor.forward_eval(graph, params, batch)
            grads = tensor.backward(graph)
            params, adam = tensor.adam_step(params, grads, adam, cfg.outer_lr,
                                            mask=mask)
            losses.append(float(loss.values))
        history.append(float(np.mean(losses)))
        epochs_run = epoch + 1
        if log_fn is not None:
            log_fn(f"pretrain epoch {epoch + 1}: mean loss {history[-1]:.6f}")
        if meta_optim._converged(history, 1e-4, 3):
            converged = True
            break
    return model, TrainResult(params, adam, history, epochs_run, converged)


def pretrain_accuracy(model, params, dataset, split):
    """Training-pool accuracy of the pretrained 20-way classifier."""
    label_to_idx = {kw: i for i, kw in enumerate(sorted(split.meta_train_keywords))}
    correct = total = 0
    for kw in sorted(split.meta_train_keywords):
        ids = list(split.train_utterances[kw])
        preds = model.predict(params, dataset, ids)
        correct += int(np.sum(preds == label_to_idx[kw]))
        total += len(ids)
    return correct / total


# ---------------------------------------------------------------------------
# Suite evaluation and reports.


@dataclass(frozen=True)
class EvalReport:
    """Per-task accuracies with their mean and sample standard deviation."""

    algo: str
    suite_id: str
    config_id: str
    accuracies: tuple
    redraws: int = 1

    def __post_init__(self):
        if not self.accuracies:
            raise ValueError("report needs at least one task accuracy")
        object.__setattr__(self, "accuracies", tuple(float(a)
                                                     for a in self.accuracies))

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        if len(self.accuracies) < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1))

    @property
    def n_tasks(self):
        return len(self.accuracies)


def evaluate_suite(system, suite):
    """Accuracy of one system on every episode of a fixed suite."""
    if not suite:
        raise ValueError("cannot evaluate an empty suite")
    accuracies = [system.evaluate_episode(ep, task_index=i)
                  for i, ep in enumerate(suite)]
    return EvalReport(
        algo=getattr(system, "algo_id", type(system).__name__),
        suite_id=suite_fingerprint(suite),
        config_id=getattr(system, "config_id", ""),
        accuracies=tuple(accuracies))


def evaluate_suite_resampled(system, suite, split, redraws, seed):
    """Suite evaluation under the broader spread reading: accuracies over
    tasks × support redraws, queries held fixed."""
    if redraws < 1:
        raise ConfigError("redraws must be >= 1")
    accuracies = []
    for i, ep in enumerate(suite):
        for r in range(redraws):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, r]))
            redrawn = resample_support(ep, split, TEST_PHASE, rng)
            accuracies.append(system.evaluate_episode(redrawn, task_index=i))
    return EvalReport(
        algo=getattr(system, "algo_id", type(system).__name__),
        suite_id=suite_fingerprint(suite),
        config_id=getattr(system, "config_id", ""),
        accuracies=tuple(accuracies), redraws=redraws)


def save_report(report, path):
    """One JSON record per task plus a summary record; stable key order."""
    records = [{
        "format": "kwsreport v1", "algo": report.algo,
        "suite": report.suite_id, "config": report.config_id,
        "tasks": report.n_tasks, "redraws": report.redraws,
    }]
    for i, acc in enumerate(report.accuracies):
        records.append({"task": i, "accuracy": acc})
    records.append({"summary": True, "mean": report.mean, "std": report.std,
                    "tasks": report.n_tasks})
    with open(path, "w", encoding="ascii") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_report(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("format") != "kwsreport v1":
        raise DatasetFormatError(f"{path}: not a kwsreport v1 file")
    header = lines[0]
    accuracies = [rec["accuracy"] for rec in lines[1:] if "accuracy" in rec]
    report = EvalReport(algo=header["algo"], suite_id=header["suite"],
                        config_id=header["config"],
                        accuracies=tuple(accuracies),
                        redraws=header.get("redraws", 1))
    summary = lines[-1]
    if summary.get("summary"):
        if (abs(summary["mean"] - report.mean) > 1e-12
                or abs(summary["std"] - report.std) > 1e-12):
            raise DatasetFormatError(f"{path}: summary does not match records")
    return report


def build_model(cfg, dataset):
    """The model family an algorithm trains, shaped for this dataset."""
    mcfg = cfg.model_config(dataset)
    if cfg.algo in METRIC_ALGOS:
        return models.METRIC_MODELS[cfg.algo](mcfg)
    if cfg.algo == "transfer1":
        return models.ClassifierModel(mcfg, 20)
    return models.ClassifierModel(mcfg, cfg.n_way)


def build_system(cfg, model, params, dataset):
    """Wrap trained parameters in the evaluation adapter for cfg.algo."""
    if cfg.algo in METRIC_ALGOS:
        system = MetricSystem(model, params, dataset)
    elif cfg.algo == "transfer1":
        system = TransferSystem(model, params, cfg, dataset, head_seed=cfg.seed)
    else:
        system = OptimSystem(model, params, cfg, dataset)
    system.algo_id = cfg.algo
    system.config_id = cfg.fingerprint()
    return system


def train_run(cfg, dataset, split, checkpoint_dir=None, log_fn=None):
    """Train one system per its RunConfig; returns (model, TrainResult)."""
    cfg.validate()
    if cfg.algo == "transfer1":
        return transfer_pretrain(dataset, split, cfg, log_fn=log_fn)
    model = build_model(cfg, dataset)
    if cfg.algo in METRIC_ALGOS:
        result = meta_metric.metric_meta_train(
            model, dataset, split, cfg.sampler(), epochs=cfg.epochs,
            seed=cfg.seed, lr=cfg.outer_lr, mask=cfg.trainable_partitions(),
            checkpoint_dir=checkpoint_dir, log_fn=log_fn)
        return model, result
    init = model.init_params(
        np.random.default_rng(np.random.SeedSequence(cfg.seed)))
    state = OuterState.init(init, cfg.effective_algo, outer_lr=cfg.outer_lr,
                            meta_batch=cfg.meta_batch)
    result = meta_optim.meta_train(
        model, dataset, split, cfg.inner(), state, cfg.sampler(),
        epochs=cfg.epochs, seed=cfg.seed,
        trainable=cfg.trainable_partitions(), checkpoint_dir=checkpoint_dir,
        log_fn=log_fn)
    return model, result


def dump_embeddings(model, params, dataset, path):
    """Write each utterance's embedding, one row per utterance, in file order."""
    if not hasattr(model, "embed_graph"):
        raise ConfigError(
            f"{type(model).__name__} has no embedding head to dump")
    graph, width = model.embed_graph()
    lines = [f"kwsemb v1 n={width}"]
    for utt in dataset.utterances:
        inputs = model.front_inputs(dataset, [utt.id], "batch")
        emb = tensor.forward_eval(graph, params, inputs).values[0]
        row = " ".join(f"{v:.17g}" for v in emb)
        lines.append(f"{utt.id}\t{utt.label}\t{row}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
