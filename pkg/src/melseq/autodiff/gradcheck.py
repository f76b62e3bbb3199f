"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from melseq.autodiff import engine as ad
from melseq.errors import EvaluationError


def _rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(out):
    val = float(np.asarray(out.data).reshape(-1)[0]) if out.size == 1 else None
    if val is None:
        raise EvaluationError(f"function must return a scalar, got shape {out.shape}")
    if not np.isfinite(val):
        raise EvaluationError(f"function value is not finite: {val}")
    return val


def grad_check(f, x, eps=1e-5):
    """Maximum relative error between tape and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    error per component is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    return grad_check_params(lambda p: f(p["x"]), {"x": x}, eps=eps)["x"]


def grad_check_params(f, params, eps=1e-5, max_entries=None, rng=None, terms=None):
    """Per-tensor maximum relative gradient error for a multi-input function.

    ``params`` maps names to Tensors; ``f`` receives that mapping. When
    ``max_entries`` is given, at most that many entries per tensor are probed
    (chosen with ``rng``), which bounds the cost for large weight matrices.

    ``terms``, if given, maps the same parameters to a list of arrays whose
    grand total equals ``f``. The central difference is then formed cell by
    cell and summed afterwards. For a loss of order one this removes the
    rounding of the total, which otherwise swamps gradients below ~1e-8.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with ad.Tape() as tape:
        out = f(params)
    _scalar(out)
    if out.requires_grad:
        tape.backward(out)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    if terms is not None:
        total = float(sum(np.sum(t) for t in terms(params)))
        value = _scalar(out)
        if abs(total - value) > 1e-9 * max(1.0, abs(value)):
            raise EvaluationError(f"terms sum to {total}, function value is {value}")

        def evaluate():
            parts = [np.asarray(t, dtype=np.float64) for t in terms(params)]
            for t in parts:
                if not np.all(np.isfinite(t)):
                    raise EvaluationError("loss terms are not finite")
            return parts

        def difference(plus, minus):
            return float(sum(np.sum(a - b) for a, b in zip(plus, minus)))

    else:

        def evaluate():
            return _scalar(f(params))

        def difference(plus, minus):
            return plus - minus

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            numeric = difference(fp, fm) / (2.0 * eps)
            worst = max(worst, float(_rel_error(analytic[name].reshape(-1)[i], numeric)))
        errors[name] = worst
    return errors
