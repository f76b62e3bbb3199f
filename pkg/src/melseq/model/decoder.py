"""Autoregressive decoder emitting ``r`` mel frames, ``r`` linear frames and a stop logit per step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from melseq.autodiff import engine as ad
from melseq.autodiff.layers import gru_cell, linear
from melseq.model import attention


def _sub(p, prefix):
    return {k: p[f"{prefix}.{k}"] for k in ("W", "U_zr", "U_h", "b")}


@dataclass
class DecoderState:
    ah: ad.Tensor
    dh: ad.Tensor
    context: ad.Tensor
    query: ad.Tensor
    n_prev: np.ndarray
    step: int = 0


@dataclass
class StepOutput:
    mel: ad.Tensor  # (B, r * n_mels), frames-major within the group
    linear: ad.Tensor  # (B, r * n_bins)
    stop_logit: ad.Tensor  # (B, 1)
    weights: ad.Tensor  # (B, N)
    state: DecoderState

    @property
    def stop(self):
        z = self.stop_logit.data[:, 0]
        return 1.0 / (1.0 + np.exp(-z))


def initial_state(batch_size, cfg, dtype=np.float32):
    zeros = lambda: ad.Tensor(np.zeros((batch_size, cfg.d), dtype=dtype))  # noqa: E731
    return DecoderState(zeros(), zeros(), zeros(), zeros(), np.zeros(batch_size, dtype=np.int64))


def dropout_masks(rng, batch_size, cfg, dtype=np.float32):
    """Inverted-dropout multipliers for each prenet layer, or ``None`` when disabled."""
    rate = cfg.prenet_dropout
    if rng is None or rate <= 0:
        return None
    keep = 1.0 - rate
    return [(rng.random((batch_size, h)) < keep).astype(dtype) / keep for h in cfg.prenet_dims]


def prenet(mel_group, p, masks=None):
    """Dense ReLU bottleneck over the previous mel group, with optional dropout masks."""
    x = mel_group
    i = 0
    while f"decoder.prenet.{i}.W" in p:
        x = ad.relu(linear(x, p, f"decoder.prenet.{i}."))
        if masks is not None:
            x = ad.mul(x, ad.Tensor(masks[i]))
        i += 1
    return x


def postnet(dh, p):
    """Two dense layers with tanh activations producing the residual mel group."""
    h = ad.tanh(linear(dh, p, "decoder.postnet.0."))
    return ad.tanh(linear(h, p, "decoder.postnet.1."))


def decode_step(state, enc, p, cfg, prev_mel_group, masks=None, force=None):
    """Advance the decoder by one step (``r`` frames).

    ``force``, when given, is called as ``force(weights_array, n_prev)`` and
    returns replacement weights ``(B, N)`` plus positions ``(B,)``; the
    context is then taken from the replaced weights.
    """
    prev = prev_mel_group if isinstance(prev_mel_group, ad.Tensor) else ad.Tensor(prev_mel_group)
    pre = prenet(prev, p, masks)
    feed = state.query if cfg.literal_query_feed else state.context
    ah = gru_cell(ad.concat([pre, feed], axis=-1), state.ah, _sub(p, "decoder.attention_rnn"))
    query = attention.compute_query(state.dh, ah, p)
    weights = attention.attention_weights(query, enc.keys, enc.mask)
    if force is not None:
        forced, n_new = force(weights.data, state.n_prev)
        weights = ad.Tensor(np.asarray(forced, dtype=weights.dtype))
    else:
        n_new = np.argmax(np.where(enc.mask, weights.data, -1.0), axis=-1)
    context = attention.context_from_weights(weights, enc.values)
    feed = state.query if cfg.literal_query_feed else context
    dh = gru_cell(ad.concat([feed, ah], axis=-1), state.dh, _sub(p, "decoder.decoder_rnn"))
    mel = ad.add(linear(dh, p, "decoder.mel."), postnet(dh, p))
    lin = linear(dh, p, "decoder.linear.")
    stop_logit = linear(dh, p, "decoder.stop.")
    new_state = DecoderState(ah, dh, context, query, np.asarray(n_new, dtype=np.int64), state.step + 1)
    return StepOutput(mel, lin, stop_logit, weights, new_state)


@dataclass
class SequenceOutput:
    mel: ad.Tensor  # (B, S * r, n_mels)
    linear: ad.Tensor  # (B, S * r, n_bins)
    stop_logits: ad.Tensor  # (B, S)
    alignments: ad.Tensor  # (B, S, N)


def decode_teacher_forced(batch, enc, p, cfg, tf_ratio=1.0, rng=None):
    """Run the decoder over every step of ``batch``.

    At each step after the first, every batch item independently receives
    its ground-truth previous mel group with probability ``tf_ratio`` and
    its own (detached) previous prediction otherwise. The first step sees a
    zero "go" group. ``rng`` drives both that choice and prenet dropout; with
    ``rng=None`` dropout is off and the choice falls back to a fixed stream.
    """
    if not 0.0 <= tf_ratio <= 1.0:
        raise ValueError(f"tf_ratio must lie in [0, 1], got {tf_ratio}")
    dtype = p["decoder.mel.W"].dtype
    B, S, r = batch.size, batch.n_steps, cfg.r
    group = r * cfg.n_mels
    gt = batch.mel_targets.reshape(B, S, group).astype(dtype, copy=False)
    choice_rng = rng if rng is not None else np.random.default_rng(0)
    state = initial_state(B, cfg, dtype)
    prev = np.zeros((B, group), dtype=dtype)
    mels, lins, stops, weights = [], [], [], []
    for s in range(S):
        if s > 0:
            use_gt = choice_rng.random(B) < tf_ratio
            prev = np.where(use_gt[:, None], gt[:, s - 1], mels[-1].data).astype(dtype, copy=False)
        out = decode_step(state, enc, p, cfg, prev, dropout_masks(rng, B, cfg, dtype))
        state = out.state
        mels.append(out.mel)
        lins.append(out.linear)
        stops.append(out.stop_logit)
        weights.append(out.weights)
    mel = ad.reshape(ad.stack(mels, axis=1), (B, S * r, cfg.n_mels))
    lin = ad.reshape(ad.stack(lins, axis=1), (B, S * r, cfg.n_bins))
    stop = ad.reshape(ad.stack(stops, axis=1), (B, S))
    return SequenceOutput(mel, lin, stop, ad.stack(weights, axis=1))
