"""Optimization-based meta-learning: first-order MAML, ANIL, BOIL, Reptile.

The inner loop adapts a variant-specific subset of the parameter partitions
with full-batch SGD on the support set.  The outer loop either accumulates
first-order query-loss gradients at the adapted parameters and applies them
to the meta-parameters with Adam (MAML/ANIL/BOIL), or moves the
meta-parameters toward the adapted copies (Reptile).

All functions are functional over ParamSets: episode batches are plain
dicts of graph inputs, so the same machinery drives real models and the
hand-built toy models used in tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import tensor
from .features import ConfigError
from .tensor import AdamState, ParamSet, backward, forward_eval, reptile_step, sgd_step

ALL_PARTITIONS = frozenset(tensor.PARTITIONS)

VARIANT_PARTITIONS = {
    "maml": ALL_PARTITIONS,
    "anil": frozenset({tensor.CLASSIFIER}),
    "boil": frozenset({tensor.ENCODER, tensor.LAYER_WEIGHTS}),
    "reptile": ALL_PARTITIONS,
}


@dataclass(frozen=True)
class InnerLoopConfig:
    """Inner-loop adaptation rule: which partitions move, how far, how often."""

    variant: str
    inner_lr: float = 5e-2
    steps_train: int = 5
    steps_test: int = 20

    def validate(self):
        if self.variant not in VARIANT_PARTITIONS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"choose from {sorted(VARIANT_PARTITIONS)}")
        if self.inner_lr <= 0:
            raise ConfigError("inner_lr must be positive")
        if self.steps_train < 0 or self.steps_test < 0:
            raise ConfigError("step counts must be >= 0")

    def adapted_partitions(self):
        return VARIANT_PARTITIONS[self.variant]


@dataclass(frozen=True)
class OuterState:
    """Meta-parameters plus the outer optimizer's state."""

    params: ParamSet
    adam: AdamState | None
    outer_lr: float = 1e-4
    meta_batch: int = 4

    @classmethod
    def init(cls, params, variant, outer_lr=1e-4, meta_batch=4):
        if meta_batch < 1:
            raise ConfigError("meta_batch must be >= 1")
        adam = None if variant == "reptile" else AdamState.init(params)
        return cls(params=params, adam=adam, outer_lr=outer_lr,
                   meta_batch=meta_batch)


def _inner_mask(params, cfg, trainable):
    mask = cfg.adapted_partitions() & frozenset(trainable)
    if cfg.variant == "boil":
        has_encoder = bool(params.names_in({tensor.ENCODER}))
        if tensor.ENCODER not in trainable or not has_encoder:
            raise ConfigError(
                "boil adapts the encoder in the inner loop, so it cannot run "
                "with a fixed or absent encoder")
    present = {params.partition(name) for name in params.names()}
    mask = frozenset(mask & present)
    if not mask:
        raise ConfigError(
            f"variant {cfg.variant!r} has no adaptable parameters here")
    return mask


def inner_adapt(params, support, cfg, model, trainable=ALL_PARTITIONS, steps=None):
    """Adapt a copy of ``params`` with SGD on the support cross-entropy.

    ``support`` is a dict of graph inputs (including labels) for the model's
    mean-reduction loss graph.  Only partitions selected by the variant and
    present in ``trainable`` move; the input ParamSet is never mutated.
    """
    cfg.validate()
    if not support:
        raise ConfigError("support batch is empty")
    mask = _inner_mask(params, cfg, trainable)
    if steps is None:
        steps = cfg.steps_train
    graph = model.loss_graph("mean")
    adapted = params
    for _ in range(steps):
        forward_eval(graph, adapted, support)
        grads = backward(graph)
        adapted = sgd_step(adapted, grads, cfg.inner_lr, mask=mask)
    return adapted


def episode_query_loss(params, query, model, reduction="sum"):
    """Cross-entropy of the model on one episode's query batch."""
    graph = model.loss_graph(reduction)
    return float(forward_eval(graph, params, query).values)


def fomaml_outer_grads(params, episode_batches, cfg, model,
                       trainable=ALL_PARTITIONS, steps=None):
    """First-order meta-gradient accumulated over a meta-batch.

    For each (support, query) pair: adapt, then take the gradient of the
    summed query cross-entropy at the adapted parameters.  Episode gradients
    are summed in episode-index order.  Returns ``(grads, query_losses)``.
    """
    if not episode_batches:
        raise ConfigError("meta-batch is empty")
    total = {name: np.zeros(t.shape) for name, t in params.items()}
    losses = []
    graph = model.loss_graph("sum")
    for support, query in episode_batches:
        if not query:
            raise ConfigError("episode has an empty query batch")
        adapted = inner_adapt(params, support, cfg, model, trainable, steps)
        loss = forward_eval(graph, adapted, query)
        grads = backward(graph)
        for name, g in grads.items():
            total[name] += g.values
        losses.append(float(loss.values))
    return total, losses


def fomaml_outer_step(state, episode_batches, cfg, model,
                      trainable=ALL_PARTITIONS, steps=None):
    """One Adam meta-update; returns (new OuterState, per-episode query losses)."""
    grads, losses = fomaml_outer_grads(
        state.params, episode_batches, cfg, model, trainable, steps)
    mask = frozenset(trainable)
    new_params, new_adam = tensor.adam_step(
        state.params, grads, state.adam, state.outer_lr, mask=mask)
    return replace(state, params=new_params, adam=new_adam), losses


def reptile_outer_step(state, adapted):
    """Move meta-parameters toward the adapted copies by the outer rate."""
    new_params = reptile_step(state.params, adapted, beta=state.outer_lr)
    return replace(state, params=new_params)


@dataclass
class TrainResult:
    """Outcome of a training loop: final state plus the loss trajectory."""

    params: ParamSet
    adam: AdamState | None
    loss_history: list = field(default_factory=list)
    epochs_run: int = 0
    converged: bool = False


def _converged(history, eps, patience):
    if len(history) <= patience:
        return False
    recent = history[-(patience + 1):]
    return all(recent[i] - recent[i + 1] < eps for i in range(patience))


def _epoch_checkpoint(directory, epoch, params, adam, metadata):
    if directory is None:
        return
    os.makedirs(directory, exist_ok=True)
    ckpt.save_checkpoint(
        os.path.join(directory, f"epoch_{epoch:03d}.json"),
        params, adam, metadata)


def meta_train(model, dataset, split, cfg, state, sampler_cfg, epochs, seed,
               trainable=ALL_PARTITIONS, checkpoint_dir=None,
               convergence_eps=1e-4, patience=3, log_fn=None):
    """Episodic meta-training until convergence or the epoch budget.

    Each epoch samples ``sampler_cfg.tasks_per_epoch`` meta-train episodes
    and consumes them in meta-batches of ``state.meta_batch``.  Training
    stops early once the epoch-mean query loss improves by less than
    ``convergence_eps`` for ``patience`` consecutive epochs.
    """
    from .episodes import TRAIN_PHASE, sample_episode

    cfg.validate()
    sampler_cfg.validate()
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    history = []
    epochs_run = 0
    for epoch in range(epochs):
        epoch_losses = []
        n_batches = max(1, sampler_cfg.tasks_per_epoch // state.meta_batch)
        for _ in range(n_batches):
            episodes = [sample_episode(split, TRAIN_PHASE, sampler_cfg, rng)
                        for _ in range(state.meta_batch)]
            batches = [model.episode_batches(dataset, ep) for ep in episodes]
            if cfg.variant == "reptile":
                adapted = [inner_adapt(state.params, support, cfg, model, trainable)
                           for support, _ in batches]
                state = reptile_outer_step(state, adapted)
                losses = [episode_query_loss(a, query, model, "mean")
                          for a, (_, query) in zip(adapted, batches)]
            else:
                state, sums = fomaml_outer_step(state, batches, cfg, model, trainable)
                losses = [s / len(ep.query) for s, ep in zip(sums, episodes)]
            epoch_losses.extend(losses)
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        epochs_run = epoch + 1
        if log_fn is not None:
            log_fn(f"epoch {epoch + 1}: mean query loss {mean_loss:.6f}")
        _epoch_checkpoint(checkpoint_dir, epoch + 1, state.params, state.adam,
                          {"epoch": epoch + 1, "variant": cfg.variant})
        if _converged(history, convergence_eps, patience):
            return TrainResult(state.params, state.adam, history, epochs_run, True)
    return TrainResult(state.params, state.adam, history, epochs_run, False)


def adapt_and_eval(params, episode, cfg, model, dataset,
                   trainable=ALL_PARTITIONS):
    """Adapt on the support set with steps_test, then score the queries.

    Returns the fraction of correctly classified query utterances.  Argmax
    ties resolve to the lowest class index; the meta-parameters are left
    untouched.
    """
    support, query = model.episode_batches(dataset, episode)
    adapted = inner_adapt(params, support, cfg, model, trainable,
                          steps=cfg.steps_test)
    logits = forward_eval(model.logits_graph(), adapted, query).values
    preds = np.argmax(logits, axis=1)
    labels = query["labels"].astype(np.int64)
    return float(np.mean(preds == labels))
