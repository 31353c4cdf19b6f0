"""Metric-based meta-learning: prototypical, matching, and relational heads.

Training runs one Adam step per episode on the variant's episode loss;
prediction is non-parametric (nearest prototype, summed support
probabilities, or highest relation score) with no test-time gradient steps.

Besides the episode graphs owned by the models, this module exposes the
underlying classification math on plain embedding arrays so each piece can
be exercised and verified in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .features import ConfigError
from .meta_optim import ALL_PARTITIONS, TrainResult, _converged, _epoch_checkpoint
from .models import attention_context_nodes
from .tensor import AdamState, ParamSet, Tensor, adam_step, backward, forward_eval


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class mean embeddings, one row per class."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError(f"prototypes must be [N, n], got shape {vectors.shape}")
        object.__setattr__(self, "vectors", vectors)

    @property
    def n_classes(self):
        return self.vectors.shape[0]


def compute_prototypes(embeddings_by_class):
    """Arithmetic mean of each class's support embeddings."""
    rows = []
    for cls, embeddings in enumerate(embeddings_by_class):
        if len(embeddings) == 0:
            raise ValueError(f"class {cls} has no support embeddings")
        rows.append(np.mean([np.asarray(e, dtype=np.float64) for e in embeddings],
                            axis=0))
    return PrototypeSet(np.stack(rows))


def proto_logits(query_embedding, prototypes):
    """Negated squared L2 distances, so the closest prototype wins softmax."""
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != prototypes.vectors.shape[1:]:
        raise ValueError(
            f"query dim {q.shape} != prototype dim {prototypes.vectors.shape[1:]}")
    diff = prototypes.vectors - q
    return -np.einsum("nd,nd->n", diff, diff)


@dataclass(frozen=True)
class AttentionContext:
    """One attention-encoder layer's parameters, applied over an episode set."""

    params: dict
    heads: int = 4

    REQUIRED = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.a", "ffn.b")

    def __post_init__(self):
        for name in self.REQUIRED:
            if f"{name}.w" not in self.params or f"{name}.b" not in self.params:
                raise ValueError(f"attention context is missing {name}.w/.b")

    @classmethod
    def from_params(cls, params, heads=4):
        """Extract the context sublayer from a matching model's ParamSet."""
        wanted = {}
        for name in cls.REQUIRED:
            for suffix in (".w", ".b"):
                wanted[name + suffix] = params[name + suffix].values
        return cls(params=wanted, heads=heads)

    def apply(self, sequence):
        """Contextualize a [S, n] embedding sequence; returns [S, n]."""
        seq = np.asarray(sequence, dtype=np.float64)
        if seq.ndim != 2:
            raise ValueError(f"expected [S, n] sequence, got shape {seq.shape}")
        n_dim = seq.shape[1]
        if n_dim % self.heads != 0:
            raise ValueError("head count must divide the embedding width")
        g = tensor.ComputeGraph()
        x = g.placeholder("seq")
        out = attention_context_nodes(
            g, g.reshape(x, (1, seq.shape[0], n_dim)),
            1, seq.shape[0], n_dim, self.heads)
        g.set_output(g.reshape(out, seq.shape))
        tensors = {name: Tensor(arr) for name, arr in self.params.items()}
        partitions = {name: tensor.CLASSIFIER for name in self.params}
        return forward_eval(g, ParamSet(tensors, partitions), {"seq": seq}).values


def matching_probs(support_embeddings, support_labels, query_embedding, ctx=None,
                   n_classes=None):
    """Class distribution by summing per-support softmax probabilities.

    All embeddings (supports plus the query) are contextualized together
    when ``ctx`` is given; with ``ctx=None`` the raw embeddings are used.
    """
    supports = np.asarray(support_embeddings, dtype=np.float64)
    labels = np.asarray(support_labels)
    query = np.asarray(query_embedding, dtype=np.float64)
    if supports.ndim != 2 or query.shape != supports.shape[1:]:
        raise ValueError(
            f"supports {supports.shape} incompatible with query {query.shape}")
    if labels.shape != (supports.shape[0],):
        raise ValueError("one label per support embedding required")
    idx = labels.astype(np.int64)
    if not np.array_equal(idx, labels):
        raise ValueError("support labels must be integers")
    if n_classes is None:
        n_classes = int(idx.max()) + 1
    if idx.min() < 0 or idx.max() >= n_classes:
        raise ValueError(f"support label out of range 0..{n_classes - 1}")

    if ctx is not None:
        contextualized = ctx.apply(np.concatenate([supports, query[None]], axis=0))
        supports = contextualized[:-1]
        query = contextualized[-1]
    diff = supports - query
    dists = np.einsum("md,md->m", diff, diff)
    shifted = -dists + dists.min()
    weights = np.exp(shifted)
    probs = weights / weights.sum()
    out = np.zeros(n_classes)
    np.add.at(out, idx, probs)
    return out


@dataclass(frozen=True)
class RelationHead:
    """4-layer ReLU perceptron scoring a query ⊕ prototype pair in (0, 1)."""

    params: dict

    def __post_init__(self):
        for i in range(4):
            if f"relation.w{i}" not in self.params:
                raise ValueError(f"relation head is missing relation.w{i}")
        if self.params["relation.w3"].shape[1] != 1:
            raise ValueError("relation head must end in a single score")

    @classmethod
    def from_params(cls, params):
        wanted = {name: params[name].values
                  for name in params.names() if name.startswith("relation.")}
        return cls(params=wanted)

    @property
    def in_dim(self):
        return self.params["relation.w0"].shape[0]


def relation_scores(query_embedding, prototypes, head):
    """Sigmoid relation score of the query against every prototype."""
    q = np.asarray(query_embedding, dtype=np.float64)
    n, d = prototypes.vectors.shape
    if q.shape != (d,):
        raise ValueError(f"query dim {q.shape} != prototype dim ({d},)")
    if head.in_dim != 2 * d:
        raise ValueError(
            f"relation head expects {head.in_dim} inputs, pairs have {2 * d}")
    g = tensor.ComputeGraph()
    query_grid = g.broadcast_axis(g.reshape(g.placeholder("q"), (1, d)), 0, n)
    pairs = g.concat([query_grid, g.placeholder("protos")], axis=1)
    h = pairs
    for i in range(4):
        h = g.affine(h, g.param(f"relation.w{i}"), g.param(f"relation.b{i}"))
        if i < 3:
            h = g.relu(h)
    g.set_output(g.reshape(g.sigmoid(h), (n,)))
    tensors = {name: Tensor(arr) for name, arr in head.params.items()}
    partitions = {name: tensor.CLASSIFIER for name in head.params}
    return forward_eval(g, ParamSet(tensors, partitions),
                        {"q": q, "protos": prototypes.vectors}).values


# ---------------------------------------------------------------------------
# Episodic training and prediction.


def metric_train_step(model, params, adam, dataset, episode, lr=1e-4,
                      mask=ALL_PARTITIONS):
    """One Adam step on the model's episode loss; returns (loss, θ′, state′)."""
    graph = model.loss_graph(episode.n_way, episode.k_shot, episode.q_per_class)
    inputs = model.episode_inputs(dataset, episode)
    loss = float(forward_eval(graph, params, inputs).values)
    grads = backward(graph)
    new_params, new_adam = adam_step(params, grads, adam, lr, mask=frozenset(mask))
    return loss, new_params, new_adam


def metric_predict(model, params, dataset, episode):
    """Predicted class per query plus episode accuracy; ties take the lowest index."""
    scores = model.episode_scores(params, dataset, episode)
    preds = np.argmax(scores, axis=1)
    labels = episode.query_labels().astype(np.int64)
    return preds, float(np.mean(preds == labels))


def metric_meta_train(model, dataset, split, sampler_cfg, epochs, seed, lr=1e-4,
                      init=None, mask=ALL_PARTITIONS, checkpoint_dir=None,
                      convergence_eps=1e-4, patience=3, log_fn=None):
    """Episode-per-step Adam training until convergence or the epoch budget."""
    from .episodes import TRAIN_PHASE, sample_episode

    sampler_cfg.validate()
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = init if init is not None else model.init_params(
        np.random.default_rng(np.random.SeedSequence(seed + 1)))
    adam = AdamState.init(params)
    history = []
    epochs_run = 0
    for epoch in range(epochs):
        losses = []
        for _ in range(sampler_cfg.tasks_per_epoch):
            episode = sample_episode(split, TRAIN_PHASE, sampler_cfg, rng)
            loss, params, adam = metric_train_step(
                model, params, adam, dataset, episode, lr=lr, mask=mask)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        epochs_run = epoch + 1
        if log_fn is not None:
            log_fn(f"epoch {epoch + 1}: mean episode loss {mean_loss:.6f}")
        _epoch_checkpoint(checkpoint_dir, epoch + 1, params, adam,
                          {"epoch": epoch + 1})
        if _converged(history, convergence_eps, patience):
            return TrainResult(params, adam, history, epochs_run, True)
    return TrainResult(params, adam, history, epochs_run, False)
