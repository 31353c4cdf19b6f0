"""Shared fixtures: a tiny randomly initialized encoder checkpoint and a
small deterministic WAV corpus, both built once per session."""

import numpy as np
import pytest

from kwsextract.audio import write_wav


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A two-block hidden-size-32 encoder checkpoint on disk.

    Random weights are fine: extraction only promises faithful pooling of
    whatever the encoder computes, not useful features.
    """
    import torch
    from transformers import HubertConfig, HubertModel

    cfg = HubertConfig(
        hidden_size=32, num_hidden_layers=2, num_attention_heads=2,
        intermediate_size=64, conv_dim=(32, 32), conv_stride=(4, 4),
        conv_kernel=(8, 8), apply_spec_augment=False)
    torch.manual_seed(0)
    model = HubertModel(cfg)
    path = tmp_path_factory.mktemp("model") / "tiny-hubert"
    model.save_pretrained(path)
    return str(path)


def _tone(rng, seconds, rate):
    t = np.arange(int(seconds * rate)) / rate
    wave = 0.4 * np.sin(2 * np.pi * rng.uniform(80.0, 400.0) * t)
    return wave + 0.05 * rng.normal(size=t.shape)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Three labels of short mono utterances, plus two hard cases: one file
    at 8 kHz (exercises resampling) and one undecodable file."""
    rng = np.random.default_rng(7)
    root = tmp_path_factory.mktemp("corpus")
    for label in ("go", "stop", "yes"):
        sub = root / label
        sub.mkdir()
        for i in range(2):
            write_wav(sub / f"utt{i}.wav", _tone(rng, 0.25, 16000), 16000)
    write_wav(root / "go" / "utt_slow.wav", _tone(rng, 0.25, 8000), 8000)
    (root / "yes" / "broken.wav").write_bytes(b"not audio at all")
    return str(root)
