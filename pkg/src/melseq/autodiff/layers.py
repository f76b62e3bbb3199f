"""Parameter containers and the recurrent cell built on the engine primitives."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from melseq.autodiff import engine as ad
from melseq.errors import DimensionError


class Params(OrderedDict):
    """Name-indexed collection of trainable tensors.

    Names are dotted paths (``"decoder.prenet.0.W"``); insertion order is the
    canonical order used for checkpoints and gradient clipping.
    """

    def add_weight(self, name, shape, rng, dtype):
        fan_in = shape[-1]
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        self[name] = ad.Tensor(data, requires_grad=True, name=name)
        return self[name]

    def add_bias(self, name, size, dtype):
        self[name] = ad.Tensor(np.zeros(size, dtype=dtype), requires_grad=True, name=name)
        return self[name]

    def add_affine(self, prefix, d_in, d_out, rng, dtype):
        self.add_weight(f"{prefix}.W", (d_out, d_in), rng, dtype)
        self.add_bias(f"{prefix}.b", d_out, dtype)

    def add_gru(self, prefix, d_in, d, rng, dtype):
        self.add_weight(f"{prefix}.W", (3 * d, d_in), rng, dtype)
        # recurrent weights split so the candidate can be fed r * h
        self.add_weight(f"{prefix}.U_zr", (2 * d, d), rng, dtype)
        self.add_weight(f"{prefix}.U_h", (d, d), rng, dtype)
        self.add_bias(f"{prefix}.b", 3 * d, dtype)

    def sub(self, prefix):
        """View of the entries under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def count(self):
        return int(sum(p.size for p in self.values()))

    def counts(self):
        return [(name, int(p.size)) for name, p in self.items()]

    def astype(self, dtype):
        out = Params()
        for k, v in self.items():
            out[k] = ad.Tensor(v.data.astype(dtype or v.dtype), requires_grad=True, name=k)
        return out

    def copy(self):
        return self.astype(None)


def linear(x, p, prefix=""):
    """Apply the affine layer stored as ``{prefix}W`` / ``{prefix}b`` in ``p`` (bias optional)."""
    return ad.affine(x, p[prefix + "W"], p.get(prefix + "b"))


def gru_cell(x, h_prev, p):
    """One GRU update.

    ``p`` holds ``W`` (3d x d_in), ``U_zr`` (2d x d), ``U_h`` (d x d) and
    ``b`` (3d). Gates are stacked in the order update, reset, candidate::

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        c = tanh(W_c x + U_h (r * h) + b_c)
        h' = (1 - z) * h + z * c
    """
    W, U_zr, U_h, b = p["W"], p["U_zr"], p["U_h"], p["b"]
    d = U_h.shape[0]
    if h_prev.shape[-1] != d or W.shape[0] != 3 * d:
        raise DimensionError(f"gru_cell: hidden {h_prev.shape} vs parameters {W.shape}, {U_h.shape}")
    gx = ad.affine(x, W, b)
    gh = ad.affine(h_prev, U_zr)
    gx_z, gx_r, gx_c = ad.split(gx, [d, d, d], axis=-1)
    gh_z, gh_r = ad.split(gh, [d, d], axis=-1)
    z = ad.sigmoid(ad.add(gx_z, gh_z))
    r = ad.sigmoid(ad.add(gx_r, gh_r))
    c = ad.tanh(ad.add(gx_c, ad.affine(ad.mul(r, h_prev), U_h)))
    return ad.add(h_prev, ad.mul(z, ad.sub(c, h_prev)))
