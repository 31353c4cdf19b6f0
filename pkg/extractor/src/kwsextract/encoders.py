"""Pretrained speech-encoder registry.

A model identifier is ``<family>/<checkpoint>``, e.g.
``hubert/facebook/hubert-base-ls960`` or ``wav2vec2/<local directory>``.
The checkpoint part is handed to ``transformers`` unchanged, so hub names
and local paths both work.
"""

from dataclasses import dataclass

import numpy as np

TARGET_RATE = 16000

_LOADERS = ("wav2vec2", "hubert", "wavlm")
_KNOWN_UNSUPPORTED = {
    "cpc": "no maintained checkpoint format is published for CPC models",
    "tera": "no maintained checkpoint format is published for TERA models",
}


class UnsupportedModelError(Exception):
    """The encoder family is recognized but cannot be loaded."""


def _model_class(family):
    import transformers

    classes = {
        "wav2vec2": transformers.Wav2Vec2Model,
        "hubert": transformers.HubertModel,
        "wavlm": transformers.WavLMModel,
    }
    return classes[family]


@dataclass(frozen=True)
class Encoder:
    """A loaded encoder plus the facts extraction needs about it."""

    family: str
    name: str
    model: object
    num_layers: int
    hidden_dim: int
    target_rate: int = TARGET_RATE

    def hidden_layers(self, samples):
        """All exposed hidden-state sequences for one utterance.

        ``samples`` is a 1-d float array at ``target_rate``; the result is
        [L, T', hidden_dim] where L counts the pre-block projection plus one
        entry per transformer block.
        """
        import torch

        values = torch.as_tensor(np.asarray(samples, dtype=np.float32))[None, :]
        with torch.no_grad():
            out = self.model(values, output_hidden_states=True)
        stacked = torch.stack(out.hidden_states, dim=0)[:, 0]
        return stacked.numpy().astype(np.float64)


def load_encoder(model_id, device="cpu"):
    """Load ``<family>/<checkpoint>`` in inference mode on ``device``."""
    family, _, name = model_id.partition("/")
    if family in _KNOWN_UNSUPPORTED:
        raise UnsupportedModelError(f"{family}: {_KNOWN_UNSUPPORTED[family]}")
    if family not in _LOADERS or not name:
        raise UnsupportedModelError(
            f"unknown encoder family {family!r}; expected <family>/<checkpoint> "
            f"with family one of {', '.join(_LOADERS)}")
    model = _model_class(family).from_pretrained(name)
    model.eval()
    model.to(device)
    cfg = model.config
    return Encoder(family=family, name=name, model=model,
                   num_layers=cfg.num_hidden_layers + 1,
                   hidden_dim=cfg.hidden_size)
