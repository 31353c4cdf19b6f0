"""Shared builders for model-level tests: small configs, a crafted
four-class dataset in either feature mode, and class-major episodes."""

from functools import lru_cache

import numpy as np

from metakws.episodes import Episode
from metakws.features import (FeatureDataset, FRAMES_MODE, POOLED_MODE,
                              UtteranceFeatures)
from metakws.models import ModelConfig


def pooled_config(**overrides):
    base = dict(mode=POOLED_MODE, num_layers=2, feat_dim=3,
                head_hidden=(6, 5, 4), embed_dim=4, attention_heads=2)
    base.update(overrides)
    return ModelConfig(**base)


def frames_config(**overrides):
    base = dict(mode=FRAMES_MODE, feat_dim=3, encoder_hidden=(5,),
                encoder_out=4, head_hidden=(6, 5, 4), embed_dim=4,
                attention_heads=2)
    base.update(overrides)
    return ModelConfig(**base)


@lru_cache(maxsize=None)
def dataset(mode=POOLED_MODE):
    """Four well-separated classes, six utterances each, three dims."""
    rng = np.random.default_rng(99)
    utterances = []
    for cls in range(4):
        mean = rng.normal(0.0, 5.0, size=3)
        for utt in range(6):
            uid = f"c{cls}u{utt}"
            if mode == POOLED_MODE:
                feats = mean + rng.normal(0.0, 1.0, size=(2, 3))
                utterances.append(UtteranceFeatures(uid, f"kw{cls}",
                                                    pooled_layers=feats))
            else:
                frames = mean + rng.normal(0.0, 1.0, size=(4, 3))
                utterances.append(UtteranceFeatures(uid, f"kw{cls}",
                                                    frames=frames))
    return FeatureDataset(mode, utterances)


def episode(n=3, k=2, q=2):
    support = tuple((f"c{cls}u{i}", cls) for cls in range(n) for i in range(k))
    query = tuple((f"c{cls}u{k + i}", cls)
                  for cls in range(n) for i in range(q))
    return Episode(support=support, query=query,
                   class_map=tuple(f"kw{cls}" for cls in range(n)),
                   k_shot=k, q_per_class=q)


def jitter(params, rng, scale=0.05):
    """Shift every tensor off the zero-bias init point.

    Fresh models put whole rows exactly on ReLU kinks (zero biases plus a
    dead encoder row give pre-activations of exactly 0), where finite
    differences are invalid; a small random offset makes the loss locally
    smooth without changing what is being verified.
    """
    return params.with_values({name: t.values + rng.normal(0.0, scale, t.shape)
                               for name, t in params.items()})
