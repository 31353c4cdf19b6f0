"""Model assembly: front ends plus classifier, prototype, matching, and
relation heads, expressed as compute-graph builders.

A model owns its configuration and caches one graph per episode shape; all
state lives in ParamSets so adaptation and evaluation stay functional.  The
front end is either the pooled layer-weighted sum (frozen upstream encoder)
or a trainable per-frame scratch encoder followed by mean pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features, tensor
from .features import FRAMES_MODE, POOLED_MODE, ConfigError
from .tensor import ParamSet, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters shared by every model family."""

    mode: str = POOLED_MODE
    num_layers: int = 3
    feat_dim: int = 8
    encoder_hidden: tuple = (32,)
    encoder_out: int = 32
    head_hidden: tuple = (64, 64, 64)
    embed_dim: int = 64
    attention_heads: int = 4

    def validate(self):
        if self.mode not in (POOLED_MODE, FRAMES_MODE):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.mode == POOLED_MODE and self.num_layers < 1:
            raise ConfigError("pooled mode needs num_layers >= 1")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be >= 1")
        if len(self.head_hidden) != 3:
            raise ConfigError("the head is a 4-layer perceptron: give 3 hidden widths")
        if self.embed_dim % self.attention_heads != 0:
            raise ConfigError("attention_heads must divide embed_dim")

    @property
    def front_dim(self):
        return self.feat_dim if self.mode == POOLED_MODE else self.encoder_out

    def for_dataset(self, dataset):
        """Copy of this config with mode and dims taken from a dataset."""
        return ModelConfig(
            mode=dataset.mode, num_layers=max(dataset.num_layers, 1),
            feat_dim=dataset.dim, encoder_hidden=self.encoder_hidden,
            encoder_out=self.encoder_out, head_hidden=self.head_hidden,
            embed_dim=self.embed_dim, attention_heads=self.attention_heads)


def _init_affine_chain(rng, widths, prefix, partition):
    tensors, partitions = {}, {}
    for i in range(len(widths) - 1):
        tensors[f"{prefix}.w{i}"] = Tensor(
            tensor.glorot_uniform(rng, widths[i], widths[i + 1]))
        tensors[f"{prefix}.b{i}"] = Tensor(np.zeros(widths[i + 1]))
        partitions[f"{prefix}.w{i}"] = partition
        partitions[f"{prefix}.b{i}"] = partition
    return tensors, partitions


def _affine_chain_nodes(g, x, depth, prefix):
    """Affine layers with ReLU between them and a linear final layer."""
    h = x
    for i in range(depth):
        h = g.affine(h, g.param(f"{prefix}.w{i}"), g.param(f"{prefix}.b{i}"))
        if i < depth - 1:
            h = g.relu(h)
    return h


class _ModelBase:
    """Front-end handling shared by the classifier and metric models."""

    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        self._graphs = {}

    def _init_front(self, rng):
        if self.cfg.mode == POOLED_MODE:
            tensors = {"layers.logits": Tensor(np.zeros(self.cfg.num_layers))}
            partitions = {"layers.logits": tensor.LAYER_WEIGHTS}
            return tensors, partitions
        return features.init_scratch_encoder(
            rng, self.cfg.feat_dim, self.cfg.encoder_hidden, self.cfg.encoder_out)

    def _front_nodes(self, g, prefix):
        """Nodes mapping one batch of raw features to [B, front_dim]."""
        x = g.placeholder(f"{prefix}_x")
        if self.cfg.mode == POOLED_MODE:
            weights = g.softmax(g.param("layers.logits"))
            return g.weight_sum(x, weights)
        depth = len(self.cfg.encoder_hidden) + 1
        h = features.scratch_encoder_nodes(g, x, depth)
        return g.matmul(g.placeholder(f"{prefix}_pool"), h)

    def front_inputs(self, dataset, ids, prefix):
        if dataset.mode != self.cfg.mode:
            raise ConfigError(
                f"model expects {self.cfg.mode!r} data, dataset is {dataset.mode!r}")
        if self.cfg.mode == POOLED_MODE:
            return {f"{prefix}_x": dataset.pooled_stack(ids)}
        frames, pool = dataset.frames_batch(ids)
        return {f"{prefix}_x": frames, f"{prefix}_pool": pool}


class ClassifierModel(_ModelBase):
    """Front end plus a 4-layer ReLU perceptron ending in class logits."""

    def __init__(self, cfg, num_classes):
        super().__init__(cfg)
        if num_classes < 2:
            raise ConfigError("need at least 2 classes")
        self.num_classes = num_classes

    def head_widths(self):
        return (self.cfg.front_dim, *self.cfg.head_hidden, self.num_classes)

    def init_params(self, rng):
        tensors, partitions = self._init_front(rng)
        ht, hp = _init_affine_chain(rng, self.head_widths(), "head", tensor.CLASSIFIER)
        tensors.update(ht)
        partitions.update(hp)
        return ParamSet(tensors, partitions)

    def _logits_nodes(self, g):
        front = self._front_nodes(g, "batch")
        return _affine_chain_nodes(g, front, 4, "head")

    def loss_graph(self, reduction="mean"):
        key = ("loss", reduction)
        if key not in self._graphs:
            g = tensor.ComputeGraph()
            logits = self._logits_nodes(g)
            loss = g.softmax_cross_entropy(
                logits, g.placeholder("labels"), reduction=reduction)
            g.set_output(loss)
            self._graphs[key] = g
        return self._graphs[key]

    def logits_graph(self):
        if "logits" not in self._graphs:
            g = tensor.ComputeGraph()
            g.set_output(self._logits_nodes(g))
            self._graphs["logits"] = g
        return self._graphs["logits"]

    def batch_inputs(self, dataset, ids, labels=None):
        inputs = self.front_inputs(dataset, ids, "batch")
        if labels is not None:
            inputs["labels"] = np.asarray(labels, dtype=np.float64)
        return inputs

    def episode_batches(self, dataset, episode):
        if episode.n_way != self.num_classes:
            raise ConfigError(
                f"episode has {episode.n_way} classes, model outputs "
                f"{self.num_classes}")
        support = self.batch_inputs(dataset, episode.support_ids(),
                                    episode.support_labels())
        query = self.batch_inputs(dataset, episode.query_ids(),
                                  episode.query_labels())
        return support, query

    def predict(self, params, dataset, ids):
        graph = self.logits_graph()
        logits = tensor.forward_eval(graph, params,
                                     self.batch_inputs(dataset, ids)).values
        return np.argmax(logits, axis=1)

    def embed_graph(self):
        """Penultimate activations as the classifier's embedding space."""
        if "embed" not in self._graphs:
            g = tensor.ComputeGraph()
            front = self._front_nodes(g, "batch")
            g.set_output(g.relu(_affine_chain_nodes(g, front, 3, "head")))
            self._graphs["embed"] = g
        return self._graphs["embed"], self.cfg.head_hidden[-1]

    def replace_output_layer(self, params, num_classes, rng):
        """Fresh final layer of a new width; all other tensors carried over.

        Returns ``(model, params)`` for the new class count.  The new layer
        is initialized from ``rng`` only, so it is independent of the
        original training run.
        """
        new_model = ClassifierModel(self.cfg, num_classes)
        widths = self.head_widths()
        tensors = {name: t for name, t in params.items()
                   if name not in ("head.w3", "head.b3")}
        partitions = {name: params.partition(name) for name in tensors}
        tensors["head.w3"] = Tensor(
            tensor.glorot_uniform(rng, widths[-2], num_classes))
        tensors["head.b3"] = Tensor(np.zeros(num_classes))
        partitions["head.w3"] = tensor.CLASSIFIER
        partitions["head.b3"] = tensor.CLASSIFIER
        return new_model, ParamSet(tensors, partitions)


class _MetricBase(_ModelBase):
    """Episode-graph plumbing shared by the three metric models."""

    def episode_inputs(self, dataset, episode):
        inputs = self.front_inputs(dataset, episode.support_ids(), "support")
        inputs.update(self.front_inputs(dataset, episode.query_ids(), "query"))
        return inputs

    def loss_graph(self, n, k, q):
        key = ("loss", n, k, q)
        if key not in self._graphs:
            self._graphs[key] = self._build_graph(n, k, q, with_loss=True)
        return self._graphs[key]

    def scores_graph(self, n, k, q):
        key = ("scores", n, k, q)
        if key not in self._graphs:
            self._graphs[key] = self._build_graph(n, k, q, with_loss=False)
        return self._graphs[key]

    def episode_scores(self, params, dataset, episode):
        graph = self.scores_graph(episode.n_way, episode.k_shot, episode.q_per_class)
        return tensor.forward_eval(
            graph, params, self.episode_inputs(dataset, episode)).values


def attention_context_nodes(g, seq, batch, s_len, n_dim, heads, qkv=None):
    """One transformer encoder layer: multi-head attention + feed-forward.

    ``seq`` is a [batch, s_len, n_dim] node; parameters are the graph params
    ``attn.{q,k,v,o}.{w,b}`` and ``ffn.{a,b}.{w,b}``.  Both sublayers carry
    residual connections; no positional signal is added, so the layer is
    equivariant to permutations of the sequence.

    ``qkv`` optionally supplies pre-projected [batch, s_len, n_dim] nodes for
    attn.q, attn.k, and attn.v; a caller whose sequences repeat rows can then
    project each distinct row once instead of once per repetition.
    """
    rows = batch * s_len
    head_dim = n_dim // heads

    def flat_affine(node, name):
        flat = g.reshape(node, (rows, n_dim))
        return g.affine(flat, g.param(f"{name}.w"), g.param(f"{name}.b"))

    projected = qkv or {
        name: g.reshape(flat_affine(seq, name), (batch, s_len, n_dim))
        for name in ("attn.q", "attn.k", "attn.v")}
    head_outs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        head_outs.append(g.attention(
            g.slice_axis(projected["attn.q"], 2, lo, hi),
            g.slice_axis(projected["attn.k"], 2, lo, hi),
            g.slice_axis(projected["attn.v"], 2, lo, hi)))
    merged = g.concat(head_outs, axis=2)
    attended = g.reshape(flat_affine(merged, "attn.o"), (batch, s_len, n_dim))
    seq = g.add(seq, attended)
    ff = g.reshape(seq, (rows, n_dim))
    ff = g.affine(ff, g.param("ffn.a.w"), g.param("ffn.a.b"))
    ff = g.relu(ff)
    ff = g.affine(ff, g.param("ffn.b.w"), g.param("ffn.b.b"))
    return g.add(seq, g.reshape(ff, (batch, s_len, n_dim)))


def _prototype_matrix(n, k):
    return np.kron(np.eye(n), np.full(k, 1.0 / k))


def _query_labels(n, q):
    return np.repeat(np.arange(n, dtype=np.float64), q)


class PrototypicalModel(_MetricBase):
    """Embedding head trained so class means classify queries by distance."""

    def init_params(self, rng):
        tensors, partitions = self._init_front(rng)
        widths = (self.cfg.front_dim, *self.cfg.head_hidden, self.cfg.embed_dim)
        ht, hp = _init_affine_chain(rng, widths, "embed", tensor.CLASSIFIER)
        tensors.update(ht)
        partitions.update(hp)
        return ParamSet(tensors, partitions)

    def _embed_nodes(self, g, prefix):
        front = self._front_nodes(g, prefix)
        return _affine_chain_nodes(g, front, 4, "embed")

    def embed_graph(self):
        if "embed" not in self._graphs:
            g = tensor.ComputeGraph()
            g.set_output(self._embed_nodes(g, "batch"))
            self._graphs["embed"] = g
        return self._graphs["embed"], self.cfg.embed_dim

    def _build_graph(self, n, k, q, with_loss):
        g = tensor.ComputeGraph()
        s_emb = self._embed_nodes(g, "support")
        q_emb = self._embed_nodes(g, "query")
        protos = g.matmul(g.const(_prototype_matrix(n, k)), s_emb)
        logits = g.scale(g.pairwise_sqdist(q_emb, protos), -1.0)
        if with_loss:
            loss = g.softmax_cross_entropy(
                logits, g.const(_query_labels(n, q)), reduction="mean")
            g.set_output(loss)
        else:
            g.set_output(logits)
        return g


class MatchingModel(_MetricBase):
    """Projection plus one attention-encoder layer over support∪query.

    Every query forms a sequence of the N·K support embeddings plus itself;
    after contextualization, softmax over negated squared distances to the
    supports gives per-support probabilities that are summed per class.
    The summed distribution is realized as a softmax over per-class
    log-sum-exp logits, which is the same quantity computed without
    underflow when support distances are far apart.
    """

    def init_params(self, rng):
        n_dim, ff = self.cfg.embed_dim, 2 * self.cfg.embed_dim
        tensors, partitions = self._init_front(rng)
        chains = (
            (("proj", (self.cfg.front_dim, n_dim)),) +
            tuple((name, (n_dim, n_dim)) for name in ("attn.q", "attn.k", "attn.v",
                                                      "attn.o")) +
            (("ffn.a", (n_dim, ff)), ("ffn.b", (ff, n_dim)))
        )
        for name, (d_in, d_out) in chains:
            tensors[f"{name}.w"] = Tensor(tensor.glorot_uniform(rng, d_in, d_out))
            tensors[f"{name}.b"] = Tensor(np.zeros(d_out))
            partitions[f"{name}.w"] = tensor.CLASSIFIER
            partitions[f"{name}.b"] = tensor.CLASSIFIER
        return ParamSet(tensors, partitions)

    def _project(self, g, prefix):
        front = self._front_nodes(g, prefix)
        return g.affine(front, g.param("proj.w"), g.param("proj.b"))

    def embed_graph(self):
        """Pre-context projections; context depends on the episode at hand."""
        if "embed" not in self._graphs:
            g = tensor.ComputeGraph()
            g.set_output(self._project(g, "batch"))
            self._graphs["embed"] = g
        return self._graphs["embed"], self.cfg.embed_dim

    def _context_nodes(self, g, seq, batch, s_len, qkv=None):
        return attention_context_nodes(
            g, seq, batch, s_len, self.cfg.embed_dim, self.cfg.attention_heads,
            qkv=qkv)

    def _build_graph(self, n, k, q, with_loss):
        g = tensor.ComputeGraph()
        n_dim = self.cfg.embed_dim
        nk, nq, s_len = n * k, n * q, n * k + 1
        s_emb = self._project(g, "support")
        q_emb = self._project(g, "query")

        def seq_of(s_rows, q_rows):
            return g.concat(
                [g.broadcast_axis(g.reshape(s_rows, (1, nk, n_dim)), 0, nq),
                 g.reshape(q_rows, (nq, 1, n_dim))], axis=1)

        qkv = {}
        for name in ("attn.q", "attn.k", "attn.v"):
            w, b = g.param(f"{name}.w"), g.param(f"{name}.b")
            qkv[name] = seq_of(g.affine(s_emb, w, b), g.affine(q_emb, w, b))
        ctx = self._context_nodes(g, seq_of(s_emb, q_emb), nq, s_len, qkv=qkv)
        ctx_s = g.slice_axis(ctx, 1, 0, nk)
        ctx_q = g.reshape(g.slice_axis(ctx, 1, nk, s_len), (nq, n_dim))
        neg_dists = g.scale(g.paired_sqdist(ctx_q, ctx_s), -1.0)
        class_logits = g.group_lse(neg_dists, k)
        if with_loss:
            loss = g.softmax_cross_entropy(
                class_logits, g.const(_query_labels(n, q)), reduction="mean")
            g.set_output(loss)
        else:
            g.set_output(g.softmax(class_logits))
        return g


class RelationalModel(_MetricBase):
    """Relation head scoring query–prototype pairs built on front-end outputs."""

    def init_params(self, rng):
        tensors, partitions = self._init_front(rng)
        widths = (2 * self.cfg.front_dim, *self.cfg.head_hidden, 1)
        ht, hp = _init_affine_chain(rng, widths, "relation", tensor.CLASSIFIER)
        tensors.update(ht)
        partitions.update(hp)
        return ParamSet(tensors, partitions)

    def embed_graph(self):
        """Front-end outputs; the relation head itself consumes pairs."""
        if "embed" not in self._graphs:
            g = tensor.ComputeGraph()
            g.set_output(self._front_nodes(g, "batch"))
            self._graphs["embed"] = g
        return self._graphs["embed"], self.cfg.front_dim

    def _build_graph(self, n, k, q, with_loss):
        g = tensor.ComputeGraph()
        d = self.cfg.front_dim
        nq = n * q
        s_front = self._front_nodes(g, "support")
        q_front = self._front_nodes(g, "query")
        protos = g.matmul(g.const(_prototype_matrix(n, k)), s_front)
        proto_grid = g.broadcast_axis(g.reshape(protos, (1, n, d)), 0, nq)
        query_grid = g.broadcast_axis(g.reshape(q_front, (nq, 1, d)), 1, n)
        pairs = g.reshape(g.concat([query_grid, proto_grid], axis=2), (nq * n, 2 * d))
        raw = _affine_chain_nodes(g, pairs, 4, "relation")
        scores = g.reshape(g.sigmoid(raw), (nq, n))
        if with_loss:
            targets = np.repeat(np.eye(n), q, axis=0)
            g.set_output(g.mse(scores, g.const(targets)))
        else:
            g.set_output(scores)
        return g


METRIC_MODELS = {
    "proto": PrototypicalModel,
    "matching": MatchingModel,
    "relational": RelationalModel,
}
