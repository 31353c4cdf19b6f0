"""Optimization-based meta-learning: inner-loop SGD and its per-variant
masks, first-order outer gradients, reptile updates, the training loop,
and adaptation-based evaluation.

Hand oracles run through a one-parameter least-squares model, so every
update is checkable by hand; partition contracts run on real models."""

import numpy as np
import pytest

from metakws import meta_optim, tensor
from metakws.episodes import SamplerConfig, build_splits
from metakws.features import (ConfigError, FRAMES_MODE, POOLED_MODE,
                              SynthConfig, generate_synthetic)
from metakws.meta_optim import (InnerLoopConfig, OuterState, adapt_and_eval,
                                episode_query_loss, fomaml_outer_grads,
                                fomaml_outer_step, inner_adapt, meta_train,
                                reptile_outer_step)
from metakws.models import ClassifierModel
from metakws.tensor import CLASSIFIER, ENCODER, LAYER_WEIGHTS, ParamSet, Tensor

from modelcases import dataset as _dataset
from modelcases import episode as _episode
from modelcases import frames_config, pooled_config


class _ToyModel:
    """One-parameter least-squares model exposing loss_graph.

    The loss on a single sample (x, y) is (w·x − y)², so SGD and the outer
    gradients have closed forms.  Both reductions coincide because every
    batch in these tests holds exactly one sample.
    """

    def __init__(self):
        self._graphs = {}

    def loss_graph(self, reduction="mean"):
        if reduction not in self._graphs:
            g = tensor.ComputeGraph()
            pred = g.matmul(g.placeholder("x"), g.param("head.w"))
            g.set_output(g.mse(pred, g.placeholder("y")))
            self._graphs[reduction] = g
        return self._graphs[reduction]


def _toy_params(w=1.0):
    return ParamSet({"head.w": Tensor(np.array([[w]]))},
                    {"head.w": CLASSIFIER})


def _toy_batch(x, y):
    return {"x": np.array([[x]]), "y": np.array([[y]])}


def _toy_cfg(steps=1, lr=0.25, variant="maml"):
    return InnerLoopConfig(variant=variant, inner_lr=lr, steps_train=steps,
                           steps_test=steps)


class TestInnerAdapt:
    """SGD adaptation on the support set."""

    def test_zero_steps_returns_params_unchanged(self):
        params = _toy_params(1.0)
        adapted = inner_adapt(params, _toy_batch(1.0, 0.0), _toy_cfg(steps=0),
                              _ToyModel())
        assert adapted["head.w"].values == params["head.w"].values

    def test_single_step_hand_value(self):
        """L(w) = w² at w=1, lr 0.25: w' = 1 − 0.25·2 = 0.5."""
        adapted = inner_adapt(_toy_params(1.0), _toy_batch(1.0, 0.0),
                              _toy_cfg(steps=1), _ToyModel())
        np.testing.assert_allclose(adapted["head.w"].values, [[0.5]],
                                   rtol=0, atol=1e-12)

    def test_two_steps_compound(self):
        """Each step halves w, so two steps reach 0.25 exactly."""
        adapted = inner_adapt(_toy_params(1.0), _toy_batch(1.0, 0.0),
                              _toy_cfg(steps=2), _ToyModel())
        np.testing.assert_allclose(adapted["head.w"].values, [[0.25]],
                                   rtol=0, atol=1e-12)

    def test_steps_override_beats_config(self):
        adapted = inner_adapt(_toy_params(1.0), _toy_batch(1.0, 0.0),
                              _toy_cfg(steps=5), _ToyModel(), steps=1)
        np.testing.assert_allclose(adapted["head.w"].values, [[0.5]],
                                   rtol=0, atol=1e-12)

    def test_original_params_not_mutated(self):
        params = _toy_params(1.0)
        inner_adapt(params, _toy_batch(1.0, 0.0), _toy_cfg(steps=3),
                    _ToyModel())
        assert params["head.w"].values == 1.0

    def test_support_loss_decreases_on_real_model(self):
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(0))
        support, _ = model.episode_batches(_dataset(), _episode())
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=5,
                              steps_test=20)
        before = episode_query_loss(params, support, model, "mean")
        adapted = inner_adapt(params, support, cfg, model)
        after = episode_query_loss(adapted, support, model, "mean")
        assert after < before

    def test_empty_support_rejected(self):
        with pytest.raises(ConfigError):
            inner_adapt(_toy_params(), {}, _toy_cfg(), _ToyModel())


class TestVariantMasks:
    """Which partitions each variant may move in the inner loop."""

    def _adapt(self, variant, mode=POOLED_MODE, trainable=None):
        cfg_model = pooled_config() if mode == POOLED_MODE else frames_config()
        model = ClassifierModel(cfg_model, 3)
        params = model.init_params(np.random.default_rng(1))
        support, _ = model.episode_batches(_dataset(mode), _episode())
        cfg = InnerLoopConfig(variant=variant, inner_lr=5e-2, steps_train=3,
                              steps_test=3)
        kwargs = {} if trainable is None else {"trainable": trainable}
        adapted = inner_adapt(params, support, cfg, model, **kwargs)
        return params, adapted

    @staticmethod
    def _moved(params, adapted, partition):
        names = params.names_in({partition})
        return [name for name in names
                if not np.array_equal(params[name].values,
                                      adapted[name].values)]

    @staticmethod
    def _frozen(params, adapted, partition):
        names = params.names_in({partition})
        return all(np.array_equal(params[name].values, adapted[name].values)
                   for name in names)

    def test_maml_adapts_everything_present(self):
        params, adapted = self._adapt("maml")
        assert self._moved(params, adapted, CLASSIFIER)
        assert self._moved(params, adapted, LAYER_WEIGHTS)

    def test_anil_freezes_all_but_classifier(self):
        params, adapted = self._adapt("anil", mode=FRAMES_MODE)
        assert self._moved(params, adapted, CLASSIFIER)
        assert self._frozen(params, adapted, ENCODER)

    def test_anil_pooled_freezes_layer_weights(self):
        params, adapted = self._adapt("anil")
        assert self._moved(params, adapted, CLASSIFIER)
        assert self._frozen(params, adapted, LAYER_WEIGHTS)

    def test_boil_freezes_classifier(self):
        params, adapted = self._adapt("boil", mode=FRAMES_MODE)
        assert self._frozen(params, adapted, CLASSIFIER)
        assert self._moved(params, adapted, ENCODER)

    def test_boil_without_encoder_params_rejected(self):
        with pytest.raises(ConfigError):
            self._adapt("boil", mode=POOLED_MODE)

    def test_boil_with_fixed_encoder_rejected(self):
        with pytest.raises(ConfigError):
            self._adapt("boil", mode=FRAMES_MODE,
                        trainable={CLASSIFIER, LAYER_WEIGHTS})


class TestFomamlOuter:
    """First-order outer gradients and the Adam meta-step."""

    def test_outer_grad_hand_value(self):
        """Adapted w is 0.5; query (x=1, y=2) gives d(w−2)²/dw = −3."""
        grads, losses = fomaml_outer_grads(
            _toy_params(1.0), [(_toy_batch(1.0, 0.0), _toy_batch(1.0, 2.0))],
            _toy_cfg(steps=1), _ToyModel())
        np.testing.assert_allclose(grads["head.w"], [[-3.0]], rtol=0,
                                   atol=1e-12)
        np.testing.assert_allclose(losses, [2.25], rtol=0, atol=1e-12)

    def test_zero_inner_steps_equals_direct_query_gradient(self):
        """With no adaptation the meta-gradient is the plain query gradient:
        d(w−2)²/dw at w=1 is −2."""
        grads, _ = fomaml_outer_grads(
            _toy_params(1.0), [(_toy_batch(1.0, 0.0), _toy_batch(1.0, 2.0))],
            _toy_cfg(steps=0), _ToyModel())
        np.testing.assert_allclose(grads["head.w"], [[-2.0]], rtol=0,
                                   atol=1e-12)

    def test_zero_steps_matches_pooled_query_batch_on_real_model(self):
        """Σ episode sum-CE gradients == gradient of sum-CE over the union
        of the query batches, so 0-step meta-training is joint training."""
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(2))
        dataset = _dataset()
        eps = [_episode(q=2), _episode(q=3)]
        batches = [model.episode_batches(dataset, ep) for ep in eps]
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=0,
                              steps_test=0)
        grads, _ = fomaml_outer_grads(params, batches, cfg, model)

        pooled_ids = [utt for ep in eps for utt in ep.query_ids()]
        pooled_labels = np.concatenate([ep.query_labels() for ep in eps])
        inputs = model.batch_inputs(dataset, pooled_ids, pooled_labels)
        graph = model.loss_graph("sum")
        tensor.forward_eval(graph, params, inputs)
        direct = tensor.backward(graph)
        for name in params.names():
            np.testing.assert_allclose(grads[name], direct[name].values,
                                       rtol=0, atol=1e-10)

    def test_meta_batch_gradients_add_linearly(self):
        """A meta-batch of the same episode twice doubles the gradient."""
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(3))
        batch = model.episode_batches(_dataset(), _episode())
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=2,
                              steps_test=2)
        single, _ = fomaml_outer_grads(params, [batch], cfg, model)
        double, _ = fomaml_outer_grads(params, [batch, batch], cfg, model)
        for name in params.names():
            np.testing.assert_allclose(double[name], 2.0 * single[name],
                                       rtol=0, atol=0)

    def test_accumulation_is_deterministic(self):
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(4))
        batches = [model.episode_batches(_dataset(), _episode(q=q))
                   for q in (2, 3)]
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=1,
                              steps_test=1)
        first, _ = fomaml_outer_grads(params, batches, cfg, model)
        second, _ = fomaml_outer_grads(params, batches, cfg, model)
        for name in params.names():
            assert np.array_equal(first[name], second[name])

    def test_outer_step_respects_trainable_mask(self):
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(5))
        state = OuterState.init(params, "maml", outer_lr=1e-4, meta_batch=1)
        batch = model.episode_batches(_dataset(), _episode())
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=1,
                              steps_test=1)
        new_state, _ = fomaml_outer_step(state, [batch], cfg, model,
                                         trainable={CLASSIFIER})
        assert np.array_equal(new_state.params["layers.logits"].values,
                              params["layers.logits"].values)
        assert not np.array_equal(new_state.params["head.w0"].values,
                                  params["head.w0"].values)

    def test_first_outer_step_moves_by_at_most_lr(self):
        """Adam's first update is ±lr per coordinate (slightly less with
        eps), never more."""
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(6))
        state = OuterState.init(params, "maml", outer_lr=1e-4, meta_batch=1)
        batch = model.episode_batches(_dataset(), _episode())
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=1,
                              steps_test=1)
        new_state, _ = fomaml_outer_step(state, [batch], cfg, model)
        for name in params.names():
            delta = new_state.params[name].values - params[name].values
            assert np.max(np.abs(delta)) <= 1e-4 + 1e-15

    def test_empty_meta_batch_rejected(self):
        with pytest.raises(ConfigError):
            fomaml_outer_grads(_toy_params(), [], _toy_cfg(), _ToyModel())


class TestReptile:
    """The move-toward-adapted-parameters outer update."""

    def test_hand_value_two_episodes(self):
        """Adapted copies 0.5 and 2.5 from w=1; mean offset −0.5, β=0.1
        gives θ' = 1.05."""
        params = _toy_params(1.0)
        model = _ToyModel()
        cfg = _toy_cfg(steps=1)
        adapted = [inner_adapt(params, _toy_batch(1.0, 0.0), cfg, model),
                   inner_adapt(params, _toy_batch(1.0, 4.0), cfg, model)]
        np.testing.assert_allclose(adapted[0]["head.w"].values, [[0.5]],
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(adapted[1]["head.w"].values, [[2.5]],
                                   rtol=0, atol=1e-12)
        state = OuterState.init(params, "reptile", outer_lr=0.1, meta_batch=2)
        new_state = reptile_outer_step(state, adapted)
        np.testing.assert_allclose(new_state.params["head.w"].values,
                                   [[1.05]], rtol=0, atol=1e-12)

    def test_fixed_point_when_adaptation_is_identity(self):
        params = _toy_params(1.0)
        state = OuterState.init(params, "reptile", outer_lr=0.1, meta_batch=2)
        new_state = reptile_outer_step(state, [params, params])
        assert np.array_equal(new_state.params["head.w"].values,
                              params["head.w"].values)

    def test_update_scales_linearly_in_outer_lr(self):
        params = _toy_params(1.0)
        adapted = [_toy_params(3.0)]
        small = reptile_outer_step(
            OuterState.init(params, "reptile", outer_lr=0.1), adapted)
        large = reptile_outer_step(
            OuterState.init(params, "reptile", outer_lr=0.2), adapted)
        move_small = small.params["head.w"].values - 1.0
        move_large = large.params["head.w"].values - 1.0
        np.testing.assert_allclose(move_large, 2.0 * move_small, rtol=0,
                                   atol=1e-15)

    def test_reptile_state_has_no_adam(self):
        state = OuterState.init(_toy_params(), "reptile")
        assert state.adam is None


class TestConvergenceRule:
    """Epoch-mean improvement below threshold for consecutive epochs."""

    def test_three_small_improvements_converge(self):
        history = [1.0, 0.5, 0.49998, 0.49996, 0.49995]
        assert meta_optim._converged(history, 1e-4, 3)

    def test_two_small_improvements_do_not(self):
        history = [1.0, 0.5, 0.49998, 0.49996]
        assert not meta_optim._converged(history, 1e-4, 3)

    def test_large_improvement_resets_the_run(self):
        history = [1.0, 0.99995, 0.9999, 0.5, 0.49995, 0.4999]
        assert not meta_optim._converged(history, 1e-4, 3)

    def test_worsening_loss_counts_as_no_improvement(self):
        history = [1.0, 0.5, 0.50002, 0.50004, 0.50001]
        assert meta_optim._converged(history, 1e-4, 3)


@pytest.fixture(scope="module")
def synth_split():
    cfg = SynthConfig(num_keywords=35, utterances_per_keyword=20, seed=21)
    dataset = generate_synthetic(cfg)
    split = build_splits(dataset, seed=13)
    return dataset, split


class TestMetaTrain:
    """The episodic training loop end to end at a tiny scale."""

    def _run(self, synth_split, variant="maml", seed=17, epochs=2):
        dataset, split = synth_split
        model = ClassifierModel(
            pooled_config(num_layers=3, feat_dim=8, head_hidden=(16, 16, 16)),
            12)
        params = model.init_params(np.random.default_rng(seed))
        state = OuterState.init(params, variant, outer_lr=1e-4, meta_batch=2)
        cfg = InnerLoopConfig(variant=variant, inner_lr=5e-2, steps_train=2,
                              steps_test=3)
        sampler = SamplerConfig(n_way=12, k_shot=2, q_per_class=2,
                                tasks_per_epoch=4)
        result = meta_train(model, dataset, split, cfg, state, sampler,
                            epochs=epochs, seed=seed)
        return model, params, result

    def test_runs_the_requested_epochs(self, synth_split):
        _, params, result = self._run(synth_split)
        assert result.epochs_run == 2
        assert len(result.loss_history) == 2
        assert not result.converged
        moved = [name for name, t in params.items()
                 if not np.array_equal(result.params[name].values, t.values)]
        assert moved

    def test_same_seed_reproduces_parameters_bit_exact(self, synth_split):
        _, _, first = self._run(synth_split, seed=23)
        _, _, second = self._run(synth_split, seed=23)
        for name, t in first.params.items():
            assert np.array_equal(t.values, second.params[name].values)

    def test_different_seed_changes_parameters(self, synth_split):
        _, _, first = self._run(synth_split, seed=23)
        _, _, second = self._run(synth_split, seed=24)
        assert any(not np.array_equal(first.params[name].values,
                                      second.params[name].values)
                   for name in first.params.names())

    def test_reptile_variant_trains(self, synth_split):
        _, params, result = self._run(synth_split, variant="reptile")
        assert result.epochs_run == 2
        assert result.adam is None

    def test_epoch_checkpoints_written(self, synth_split, tmp_path):
        dataset, split = synth_split
        model = ClassifierModel(
            pooled_config(num_layers=3, feat_dim=8, head_hidden=(16, 16, 16)),
            12)
        params = model.init_params(np.random.default_rng(0))
        state = OuterState.init(params, "maml", meta_batch=2)
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=1,
                              steps_test=1)
        sampler = SamplerConfig(n_way=12, k_shot=1, q_per_class=1,
                                tasks_per_epoch=2)
        meta_train(model, dataset, split, cfg, state, sampler, epochs=2,
                   seed=0, checkpoint_dir=tmp_path)
        assert (tmp_path / "epoch_001.json").exists()
        assert (tmp_path / "epoch_002.json").exists()


class TestAdaptAndEval:
    """Support adaptation followed by query accuracy."""

    def _setup(self, seed=0):
        model = ClassifierModel(pooled_config(), 3)
        params = model.init_params(np.random.default_rng(seed))
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=2,
                              steps_test=5)
        return model, params, cfg

    def test_accuracy_is_a_query_fraction(self):
        model, params, cfg = self._setup()
        acc = adapt_and_eval(params, _episode(), cfg, model, _dataset())
        assert 0.0 <= acc <= 1.0
        assert (acc * 6) == round(acc * 6)

    def test_deterministic(self):
        model, params, cfg = self._setup()
        first = adapt_and_eval(params, _episode(), cfg, model, _dataset())
        second = adapt_and_eval(params, _episode(), cfg, model, _dataset())
        assert first == second

    def test_meta_params_left_untouched(self):
        model, params, cfg = self._setup()
        before = {name: t.values.copy() for name, t in params.items()}
        adapt_and_eval(params, _episode(), cfg, model, _dataset())
        for name, values in before.items():
            assert np.array_equal(params[name].values, values)

    def test_untrained_zero_step_accuracy_is_chance(self, synth_split):
        """Class indices shuffle per episode, so an untrained model with no
        adaptation sits at 1/12 over many test episodes."""
        from metakws.episodes import TEST_PHASE, sample_episode

        dataset, split = synth_split
        model = ClassifierModel(
            pooled_config(num_layers=3, feat_dim=8, head_hidden=(16, 16, 16)),
            12)
        params = model.init_params(np.random.default_rng(31))
        cfg = InnerLoopConfig(variant="maml", inner_lr=5e-2, steps_train=0,
                              steps_test=0)
        sampler = SamplerConfig(n_way=12, k_shot=1, q_per_class=2,
                                tasks_per_epoch=1)
        rng = np.random.default_rng(77)
        accs = [adapt_and_eval(
            params, sample_episode(split, TEST_PHASE, sampler, rng), cfg,
            model, dataset) for _ in range(300)]
        assert abs(float(np.mean(accs)) - 1.0 / 12.0) < 0.03
