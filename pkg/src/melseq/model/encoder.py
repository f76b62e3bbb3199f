"""Character encoder producing attention keys and values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from melseq.autodiff import engine as ad
from melseq.autodiff.layers import gru_cell, linear
from melseq.errors import InputError, VocabError


@dataclass
class EncoderOutput:
    """Keys and values laid out ``(B, N, d)``; ``mask`` marks real characters.

    Item ``i``'s key matrix in the usual ``d x N`` orientation is
    ``keys.data[i, :lengths[i]].T``.
    """

    keys: ad.Tensor
    values: ad.Tensor
    mask: np.ndarray
    lengths: np.ndarray

    @property
    def d(self):
        return self.keys.shape[-1]

    def key_matrix(self, i):
        return self.keys.data[i, : self.lengths[i]].T

    def value_matrix(self, i):
        return self.values.data[i, : self.lengths[i]].T


def encode_batch(char_ids, lengths, p):
    """Embed, run a bidirectional GRU, and project each position to (key, value).

    Position ``n`` carries ``[forward_n, backward_n]`` before projection. The
    backward pass restarts from a zero state at each item's last real
    character, so outputs over the real prefix do not depend on padding.
    """
    char_ids = np.asarray(char_ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if char_ids.ndim != 2 or char_ids.shape[0] == 0:
        raise InputError(f"encode_batch needs a non-empty (B, N) id matrix, got shape {char_ids.shape}")
    B, N = char_ids.shape
    if lengths.shape != (B,) or (lengths < 1).any() or (lengths > N).any():
        raise InputError(f"lengths {lengths.tolist()} invalid for id matrix of width {N}")
    emb = p["encoder.embedding"]
    if char_ids.min() < 0 or char_ids.max() >= emb.shape[0]:
        raise VocabError(f"character id out of range [0, {emb.shape[0]})")
    fwd = {k: p[f"encoder.fwd.{k}"] for k in ("W", "U_zr", "U_h", "b")}
    bwd = {k: p[f"encoder.bwd.{k}"] for k in ("W", "U_zr", "U_h", "b")}
    d = fwd["U_h"].shape[0]
    mask = np.arange(N)[None, :] < lengths[:, None]

    x = [ad.embedding(emb, char_ids[:, n]) for n in range(N)]
    h = ad.Tensor(np.zeros((B, d), dtype=emb.dtype))
    forward_states = []
    for n in range(N):
        h = gru_cell(x[n], h, fwd)
        forward_states.append(h)
    h = ad.Tensor(np.zeros((B, d), dtype=emb.dtype))
    backward_states = [None] * N
    for n in reversed(range(N)):
        h = gru_cell(x[n], h, bwd)
        if not mask[:, n].all():
            keep = np.repeat(mask[:, n : n + 1], d, axis=1).astype(emb.dtype)
            h = ad.mul(h, ad.Tensor(keep))
        backward_states[n] = h
    hidden = ad.stack([ad.concat([f, b], axis=-1) for f, b in zip(forward_states, backward_states)], axis=1)
    keys = linear(hidden, p, "encoder.key.")
    values = linear(hidden, p, "encoder.value.")
    return EncoderOutput(keys, values, mask, lengths)


def encode(char_ids, p):
    """Unbatched convenience wrapper around :func:`encode_batch`."""
    ids = np.asarray(char_ids, dtype=np.int64).reshape(1, -1)
    if ids.shape[1] == 0:
        raise InputError("cannot encode an empty character sequence")
    return encode_batch(ids, [ids.shape[1]], p)
