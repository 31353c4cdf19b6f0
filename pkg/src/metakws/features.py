"""Feature datasets: file ingestion, synthetic generation, and front ends.

A dataset is either *pooled* (each utterance carries one time-averaged
vector per encoder layer) or *frames* (each utterance carries its raw
per-frame features, for models that train an encoder from scratch).  Both
live in line-oriented text files whose format is the contract with the
offline feature extractor, so parsing errors always cite a line number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import ComputeGraph, ParamSet, Tensor

SILENCE_LABEL = "_silence"

POOLED_MODE = "pooled"
FRAMES_MODE = "frames"


class DatasetFormatError(Exception):
    """A feature, suite, or split file violates its declared format."""


class ConfigError(Exception):
    """A configuration value or combination is invalid."""


def _fmt(x):
    return f"{x:.17g}"


def _fmt_row(values):
    return " ".join(_fmt(v) for v in values)


@dataclass(frozen=True)
class UtteranceFeatures:
    """Features for one utterance: pooled per-layer vectors or raw frames."""

    id: str
    label: str
    pooled_layers: np.ndarray | None = None
    frames: np.ndarray | None = None

    def __post_init__(self):
        if (self.pooled_layers is None) == (self.frames is None):
            raise ValueError(f"utterance {self.id!r}: exactly one feature kind required")


class FeatureDataset:
    """An immutable collection of utterances with uniform feature shapes."""

    def __init__(self, mode, utterances):
        if mode not in (POOLED_MODE, FRAMES_MODE):
            raise ValueError(f"unknown dataset mode {mode!r}")
        if not utterances:
            raise ValueError("dataset has no utterances")
        self.mode = mode
        self.utterances = list(utterances)
        self.by_id = {}
        first = self.utterances[0]
        if mode == POOLED_MODE:
            if first.pooled_layers is None:
                raise ValueError("pooled dataset built from frame utterances")
            self.num_layers, self.dim = first.pooled_layers.shape
        else:
            if first.frames is None:
                raise ValueError("frame dataset built from pooled utterances")
            self.num_layers = 0
            self.dim = first.frames.shape[1]
        label_counts = {}
        for utt in self.utterances:
            if utt.id in self.by_id:
                raise ValueError(f"duplicate utterance id {utt.id!r}")
            feats = utt.pooled_layers if mode == POOLED_MODE else utt.frames
            if feats is None:
                raise ValueError(f"utterance {utt.id!r} does not match dataset mode")
            if mode == POOLED_MODE and feats.shape != (self.num_layers, self.dim):
                raise ValueError(
                    f"utterance {utt.id!r}: shape {feats.shape} != "
                    f"({self.num_layers}, {self.dim})")
            if mode == FRAMES_MODE and (feats.ndim != 2 or feats.shape[1] != self.dim):
                raise ValueError(f"utterance {utt.id!r}: frame dim != {self.dim}")
            if not np.all(np.isfinite(feats)):
                raise ValueError(f"utterance {utt.id!r}: non-finite features")
            self.by_id[utt.id] = utt
            label_counts[utt.label] = label_counts.get(utt.label, 0) + 1
        for label, count in label_counts.items():
            if count < 2:
                raise ValueError(f"label {label!r} has only {count} utterance")
        self.labels = sorted(label_counts)

    @property
    def keyword_labels(self):
        return [lab for lab in self.labels if lab != SILENCE_LABEL]

    def ids_for_label(self, label):
        return [u.id for u in self.utterances if u.label == label]

    def pooled_stack(self, ids):
        """Stack pooled features for the given ids into a [B, L, d] array."""
        return np.stack([self.by_id[i].pooled_layers for i in ids])

    def frames_batch(self, ids):
        """Concatenate frames for the given ids and return a mean-pool matrix.

        Returns ``(frames [sum_T, d], pool [B, sum_T])`` where row b of
        ``pool`` averages exactly the frames of utterance b.
        """
        chunks = [self.by_id[i].frames for i in ids]
        total = sum(c.shape[0] for c in chunks)
        pool = np.zeros((len(ids), total))
        offset = 0
        for b, chunk in enumerate(chunks):
            t = chunk.shape[0]
            pool[b, offset:offset + t] = 1.0 / t
            offset += t
        return np.concatenate(chunks, axis=0), pool


# ---------------------------------------------------------------------------
# Functional front-end operations.  The same math appears inside model
# graphs; these standalone forms serve direct use and testing.


def time_mean_pool(frames):
    """Arithmetic mean over the time axis of a [T, d] frame matrix."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected non-empty [T, d] frames, got shape {frames.shape}")
    return frames.mean(axis=0)


@dataclass(frozen=True)
class LayerWeights:
    """Trainable per-layer mixing logits; weights are their softmax."""

    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 1:
            raise ValueError(f"layer logits must be a vector, got shape {logits.shape}")
        object.__setattr__(self, "logits", logits)

    def weights(self):
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()


def weighted_layer_sum(pooled_layers, layer_weights):
    """Softmax-weighted sum of per-layer pooled vectors.

    Evaluated through the compute graph so the exact same primitives train
    inside models.
    """
    pooled_layers = np.asarray(pooled_layers, dtype=np.float64)
    if pooled_layers.ndim != 2:
        raise ValueError(f"expected [L, d] layers, got shape {pooled_layers.shape}")
    if pooled_layers.shape[0] != layer_weights.logits.shape[0]:
        raise ValueError(
            f"{pooled_layers.shape[0]} layers vs "
            f"{layer_weights.logits.shape[0]} layer weights")
    g = ComputeGraph()
    out = g.weight_sum(g.placeholder("layers"), g.softmax(g.param("logits")))
    g.set_output(out)
    params = ParamSet({"logits": Tensor(layer_weights.logits)},
                      {"logits": tensor.LAYER_WEIGHTS})
    return tensor.forward_eval(g, params, {"layers": pooled_layers}).values


def init_scratch_encoder(rng, d_in, hidden, d_out):
    """Glorot-initialized per-frame perceptron parameters, encoder-partitioned.

    Returns ``(tensors, partitions)`` dicts with names ``enc.w0`` .. and the
    matching biases; hidden layers get ReLU, the final layer stays linear.
    """
    widths = [d_in, *hidden, d_out]
    tensors, partitions = {}, {}
    for i in range(len(widths) - 1):
        tensors[f"enc.w{i}"] = Tensor(tensor.glorot_uniform(rng, widths[i], widths[i + 1]))
        tensors[f"enc.b{i}"] = Tensor(np.zeros(widths[i + 1]))
        partitions[f"enc.w{i}"] = tensor.ENCODER
        partitions[f"enc.b{i}"] = tensor.ENCODER
    return tensors, partitions


def scratch_encoder_nodes(g, x, num_layers):
    """Append the per-frame perceptron to graph ``g`` on frame node ``x``."""
    h = x
    for i in range(num_layers):
        h = g.affine(h, g.param(f"enc.w{i}"), g.param(f"enc.b{i}"))
        if i < num_layers - 1:
            h = g.relu(h)
    return h


def _encoder_depth(params):
    depth = 0
    while f"enc.w{depth}" in params:
        depth += 1
    if depth == 0:
        raise ConfigError("no encoder parameters (enc.w0 ...) present")
    return depth


def scratch_encoder_forward(frames, params):
    """Run the scratch encoder over one utterance and mean-pool over time."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected non-empty [T, d] frames, got shape {frames.shape}")
    depth = _encoder_depth(params)
    if params["enc.w0"].shape[0] != frames.shape[1]:
        raise ValueError(
            f"frame dim {frames.shape[1]} != encoder input width "
            f"{params['enc.w0'].shape[0]}")
    g = ComputeGraph()
    h = scratch_encoder_nodes(g, g.placeholder("frames"), depth)
    g.set_output(g.mean_axis(h, axis=0))
    return tensor.forward_eval(g, params, {"frames": frames}).values


# ---------------------------------------------------------------------------
# Synthetic data.  Class identity is a per-layer Gaussian mean; utterances
# scatter around it.  Noise classes are generated the same way but share the
# silence label, giving the silence pool several distinct modes.


@dataclass(frozen=True)
class SynthConfig:
    """Shape and spread of a generated dataset."""

    num_keywords: int = 35
    num_layers: int = 3
    dim: int = 8
    utterances_per_keyword: int = 20
    sigma_within: float = 1.0
    sigma_between: float = 10.0
    noise_classes: int = 4
    seed: int = 0
    mode: str = POOLED_MODE
    frames_per_utterance: int = 10
    sigma_frame: float = 1.0

    def validate(self):
        if self.sigma_within <= 0 or self.sigma_between <= 0:
            raise ConfigError("sigma_within and sigma_between must be positive")
        if self.mode not in (POOLED_MODE, FRAMES_MODE):
            raise ConfigError(f"unknown synthetic mode {self.mode!r}")
        if self.mode == FRAMES_MODE and (
                self.frames_per_utterance < 1 or self.sigma_frame <= 0):
            raise ConfigError("frames mode needs frames_per_utterance >= 1 "
                              "and sigma_frame > 0")
        if self.num_keywords < 1 or self.utterances_per_keyword < 2:
            raise ConfigError("need >= 1 keyword and >= 2 utterances per keyword")
        if self.noise_classes < 1:
            raise ConfigError("need >= 1 noise class for the silence pool")


def generate_synthetic(config):
    """Generate a FeatureDataset deterministically from the config seed."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    utterances = []

    def emit(label, prefix, class_idx):
        if config.mode == POOLED_MODE:
            mean = rng.normal(0.0, config.sigma_between,
                              size=(config.num_layers, config.dim))
        else:
            mean = rng.normal(0.0, config.sigma_between, size=config.dim)
        for u in range(config.utterances_per_keyword):
            utt_id = f"{prefix}{class_idx:03d}_{u:03d}"
            scatter = rng.normal(0.0, config.sigma_within, size=mean.shape)
            if config.mode == POOLED_MODE:
                utterances.append(UtteranceFeatures(
                    id=utt_id, label=label, pooled_layers=mean + scatter))
            else:
                frames = (mean + scatter) + rng.normal(
                    0.0, config.sigma_frame,
                    size=(config.frames_per_utterance, config.dim))
                utterances.append(UtteranceFeatures(
                    id=utt_id, label=label, frames=frames))

    for k in range(config.num_keywords):
        emit(f"kw{k:03d}", "kw", k)
    for n in range(config.noise_classes):
        emit(SILENCE_LABEL, "noise", n)
    return FeatureDataset(config.mode, utterances)


# ---------------------------------------------------------------------------
# File formats.


def save_dataset(dataset, path):
    """Write a dataset as line-oriented text with full float precision."""
    lines = []
    if dataset.mode == POOLED_MODE:
        lines.append(f"kwsfeat pooled v1 L={dataset.num_layers} d={dataset.dim}")
        for utt in dataset.utterances:
            lines.append(
                f"{utt.id}\t{utt.label}\t{_fmt_row(utt.pooled_layers.reshape(-1))}")
    else:
        lines.append(f"kwsfeat frames v1 d={dataset.dim}")
        for utt in dataset.utterances:
            t = utt.frames.shape[0]
            lines.append(
                f"{utt.id}\t{utt.label}\t{t}\t{_fmt_row(utt.frames.reshape(-1))}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(header):
    parts = header.split()
    if len(parts) >= 3 and parts[0] == "kwsfeat" and parts[2] == "v1":
        kv = {}
        for item in parts[3:]:
            key, _, value = item.partition("=")
            kv[key] = value
        try:
            if parts[1] == POOLED_MODE:
                return POOLED_MODE, int(kv["L"]), int(kv["d"])
            if parts[1] == FRAMES_MODE:
                return FRAMES_MODE, 0, int(kv["d"])
        except (KeyError, ValueError):
            pass
    raise DatasetFormatError(f"line 1: unrecognized header {header!r}")


def _parse_floats(text, expect, lineno):
    values = np.array(text.split(), dtype=np.float64) if text.strip() else np.empty(0)
    if values.shape[0] != expect:
        raise DatasetFormatError(
            f"line {lineno}: expected {expect} values, found {values.shape[0]}")
    if not np.all(np.isfinite(values)):
        raise DatasetFormatError(f"line {lineno}: non-finite value")
    return values


def load_dataset(path):
    """Parse a pooled or frames feature file; errors cite the line number."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    mode, num_layers, dim = _parse_header(lines[0])
    utterances = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if mode == POOLED_MODE:
            if len(fields) != 3:
                raise DatasetFormatError(
                    f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            utt_id, label, payload = fields
            values = _parse_floats(payload, num_layers * dim, lineno)
            feats = UtteranceFeatures(
                id=utt_id, label=label,
                pooled_layers=values.reshape(num_layers, dim))
        else:
            if len(fields) != 4:
                raise DatasetFormatError(
                    f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
            utt_id, label, t_text, payload = fields
            try:
                t = int(t_text)
            except ValueError:
                raise DatasetFormatError(f"line {lineno}: bad frame count {t_text!r}")
            if t < 1:
                raise DatasetFormatError(f"line {lineno}: frame count must be >= 1")
            values = _parse_floats(payload, t * dim, lineno)
            feats = UtteranceFeatures(id=utt_id, label=label,
                                      frames=values.reshape(t, dim))
        if utt_id in seen:
            raise DatasetFormatError(f"line {lineno}: duplicate id {utt_id!r}")
        seen.add(utt_id)
        utterances.append(feats)
    if not utterances:
        raise DatasetFormatError("line 2: file has a header but no records")
    try:
        return FeatureDataset(mode, utterances)
    except ValueError as exc:
        raise DatasetFormatError(str(exc))
