"""Query-key attention, the diagonal guide mask, and inference-time incremental forcing.

Alignments handed to these helpers as plain matrices are ``(N chars, T steps)``;
batched alignments coming out of the decoder are ``(B, T, N)``.
"""

from __future__ import annotations

import math

import numpy as np

from melseq.autodiff import engine as ad
from melseq.errors import DimensionError


def compute_query(dh_prev, ah_prev, p):
    """Query from the previous decoder state and the attention-RNN state."""
    return ad.affine(ad.concat([dh_prev, ah_prev], axis=-1), p["decoder.query.W"], p["decoder.query.b"])


def attention_weights(query, keys, key_mask):
    """``softmax(q . k_n / sqrt(d))`` over unmasked positions; returns ``(B, N)``."""
    B, N, d = keys.shape
    if query.shape != (B, d):
        raise DimensionError(f"query {query.shape} does not match keys {keys.shape}")
    scores = ad.reshape(ad.matmul(keys, ad.reshape(query, (B, d, 1))), (B, N))
    return ad.softmax_rows(scores, scale=math.sqrt(d), mask=key_mask)


def context_from_weights(weights, values):
    B, N, d = values.shape
    return ad.reshape(ad.matmul(ad.reshape(weights, (B, 1, N)), values), (B, d))


def attend(query, keys, values, key_mask):
    """Scaled dot-product attention. Returns ``(context (B, d), weights (B, N))``."""
    weights = attention_weights(query, keys, key_mask)
    return context_from_weights(weights, values), weights


def guided_mask(N, T, g=0.2):
    """Penalty matrix ``W[n, t] = 1 - exp(-(n/N - t/T)^2 / (2 g^2))``, zero-based n and t."""
    if N < 1 or T < 1:
        raise ValueError(f"guided_mask needs N, T >= 1, got N={N}, T={T}")
    n = np.arange(N)[:, None] / N
    t = np.arange(T)[None, :] / T
    return 1.0 - np.exp(-((n - t) ** 2) / (2.0 * g * g))


def guided_attention_loss(A, W, mask=None):
    """Mean of ``A * W`` over the cells selected by ``mask`` (all cells by default).

    ``A`` may be a Tensor (gradient flows) or an array; ``W`` and ``mask`` are
    constants of the same shape.
    """
    A_t = A if isinstance(A, ad.Tensor) else ad.Tensor(A)
    W = np.asarray(W, dtype=A_t.dtype)
    if W.shape != A_t.shape:
        raise DimensionError(f"alignment {A_t.shape} and guide mask {W.shape} differ in shape")
    m = np.ones(W.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = max(int(m.sum()), 1)
    weighted = ad.Tensor(np.where(m, W, 0.0).astype(A_t.dtype) / count)
    out = ad.sum(ad.mul(A_t, weighted))
    return out if isinstance(A, ad.Tensor) else float(out.data)


def batch_guide(char_lengths, step_lengths, n_chars, n_steps, g=0.2, dtype=np.float64):
    """Per-item guide masks and validity masks, both ``(B, n_steps, n_chars)``."""
    B = len(char_lengths)
    W = np.zeros((B, n_steps, n_chars), dtype=dtype)
    valid = np.zeros((B, n_steps, n_chars), dtype=bool)
    for i, (N, T) in enumerate(zip(char_lengths, step_lengths)):
        W[i, :T, :N] = guided_mask(int(N), int(T), g).T
        valid[i, :T, :N] = True
    return W, valid


def band_mask(N, T, band=0.1):
    n = np.arange(N)[:, None] / N
    t = np.arange(T)[None, :] / T
    return np.abs(n - t) <= band + 1e-12


def diagonal_mass(A, band=0.1):
    """Fraction of the attention mass of an ``(N, T)`` alignment within the diagonal band."""
    A = np.asarray(A, dtype=np.float64)
    total = A.sum()
    if total <= 0:
        return 0.0
    return float(A[band_mask(*A.shape, band)].sum() / total)


def batch_diagonal_mass(alignments, char_lengths, step_lengths, band=0.1):
    """Mean per-item diagonal mass of decoder alignments shaped ``(B, T, N)``."""
    vals = [
        diagonal_mass(a[: int(T), : int(N)].T, band)
        for a, N, T in zip(np.asarray(alignments), char_lengths, step_lengths)
    ]
    return float(np.mean(vals))


def force_incremental(weights, n_prev, strict_band=False):
    """Keep the attention peak moving forward by at most three characters per step.

    If the peak ``n_raw`` moved by ``n_raw - n_prev`` outside ``{0, 1, 2, 3}``
    (``{1, 2, 3}`` with ``strict_band``), the column is replaced by a one-hot
    at ``min(n_prev + 1, N - 1)``. Returns ``(weights, position)``.
    """
    weights = np.asarray(weights)
    N = weights.shape[-1]
    n_raw = int(np.argmax(weights))
    delta = n_raw - int(n_prev)
    low = 1 if strict_band else 0
    if low <= delta <= 3:
        return weights, n_raw
    n_new = min(int(n_prev) + 1, N - 1)
    forced = np.zeros_like(weights)
    forced[n_new] = 1.0
    return forced, n_new
