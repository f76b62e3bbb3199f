from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from melseq.autodiff import Params


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``literal_query_feed`` feeds the previous query to both decoder cells in place
    of the attention context, i.e. the recurrences exactly as printed; the
    default wiring gives the AttentionRNN (prenet, previous context) and the
    DecoderRNN (current context, attention state).
    """

    vocab_size: int = 50
    d: int = 256
    r: int = 5
    n_mels: int = 80
    n_bins: int = 513
    prenet_dims: tuple = (256, 256)
    postnet_dim: int = 256
    prenet_dropout: float = 0.5
    literal_query_feed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "prenet_dims", tuple(int(v) for v in self.prenet_dims))

    def to_dict(self):
        out = asdict(self)
        out["prenet_dims"] = list(self.prenet_dims)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "prenet_dims" in d:
            d["prenet_dims"] = tuple(d["prenet_dims"])
        return cls(**d)


def init_params(cfg, seed=0, dtype=np.float32):
    """Fresh parameters: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    p = Params()
    d = cfg.d
    p.add_weight("encoder.embedding", (cfg.vocab_size, d), rng, dtype)
    p.add_gru("encoder.fwd", d, d, rng, dtype)
    p.add_gru("encoder.bwd", d, d, rng, dtype)
    # no key bias: it shifts every score in a row by q.b, which softmax ignores
    p.add_weight("encoder.key.W", (d, 2 * d), rng, dtype)
    p.add_affine("encoder.value", 2 * d, d, rng, dtype)

    group = cfg.r * cfg.n_mels
    dims = (group, *cfg.prenet_dims)
    for i in range(len(cfg.prenet_dims)):
        p.add_affine(f"decoder.prenet.{i}", dims[i], dims[i + 1], rng, dtype)
    p.add_gru("decoder.attention_rnn", cfg.prenet_dims[-1] + d, d, rng, dtype)
    p.add_affine("decoder.query", 2 * d, d, rng, dtype)
    p.add_gru("decoder.decoder_rnn", 2 * d, d, rng, dtype)
    p.add_affine("decoder.mel", d, group, rng, dtype)
    p.add_affine("decoder.postnet.0", d, cfg.postnet_dim, rng, dtype)
    p.add_affine("decoder.postnet.1", cfg.postnet_dim, group, rng, dtype)
    p.add_affine("decoder.linear", d, cfg.r * cfg.n_bins, rng, dtype)
    p.add_affine("decoder.stop", d, 1, rng, dtype)
    return p
