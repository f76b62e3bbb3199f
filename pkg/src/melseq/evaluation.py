"""Evaluation utilities: MOS statistics, alignment images, the guided-vs-unguided experiment, gradient audit."""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from melseq import audio, data, model, training
from melseq.autodiff import engine as ad
from melseq.autodiff.gradcheck import grad_check_params
from melseq.autodiff.layers import Params, gru_cell
from melseq.errors import FormatError, InputError
from melseq.model import attention

# -- MOS -----------------------------------------------------------------------


class RatingError(FormatError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def read_ratings(path):
    """Parse a ``sample_id,rater_id,rating`` CSV (header optional) into row tuples."""
    rows, seen = [], set()
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, rec in enumerate(csv.reader(f), 1):
            if not rec or not "".join(rec).strip():
                continue
            if lineno == 1 and rec[-1].strip().lower() == "rating":
                continue
            if len(rec) != 3:
                raise RatingError(lineno, f"expected 3 fields, got {len(rec)}")
            sample, rater, value = (s.strip() for s in rec)
            try:
                rating = int(value)
            except ValueError:
                raise RatingError(lineno, f"rating {value!r} is not an integer") from None
            if not 1 <= rating <= 5:
                raise RatingError(lineno, f"rating {rating} outside 1..5")
            if (sample, rater) in seen:
                raise RatingError(lineno, f"duplicate rating for sample {sample!r} by rater {rater!r}")
            seen.add((sample, rater))
            rows.append((sample, rater, rating))
    return rows


@dataclass
class MosSummary:
    mean: float
    halfwidth: float
    n: int
    std: float

    def __str__(self):
        return f"{self.mean:.3f} ± {self.halfwidth:.3f}"


def mos(ratings):
    """Mean opinion score with a normal-approximation 95% half-width ``1.96 * s / sqrt(n)``.

    ``s`` is the sample standard deviation (ddof=1); a single rating has
    half-width 0.
    """
    r = np.asarray(list(ratings), dtype=np.float64)
    if r.size == 0:
        raise InputError("no ratings")
    std = float(r.std(ddof=1)) if r.size > 1 else 0.0
    return MosSummary(float(r.mean()), 1.96 * std / math.sqrt(r.size), int(r.size), std)


def group_by_set(rows):
    """Ratings per sample set, where the set is the ``sample_id`` prefix before ``/`` ("all" without one)."""
    groups = {}
    for sample, _, rating in rows:
        key = sample.split("/", 1)[0] if "/" in sample else "all"
        groups.setdefault(key, []).append(rating)
    return groups


def mos_stats(path):
    """Overall MOS of a ratings file."""
    rows = read_ratings(path)
    if not rows:
        raise InputError(f"{path}: ratings file is empty")
    return mos(r for _, _, r in rows)


# -- PGM -----------------------------------------------------------------------


def alignment_to_pixels(A):
    """8-bit grayscale with ``pixel = round(255 * A / max(A))``; rows are characters."""
    A = np.asarray(A, dtype=np.float64)
    peak = A.max() if A.size else 0.0
    if peak <= 0:
        return np.zeros(A.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * A / peak), 0, 255).astype(np.uint8)


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path):
    blob = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        parts.append(blob[start:pos])
    if parts[0] != b"P5":
        raise FormatError(f"{path}: magic={parts[0]!r}, expected b'P5'")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(blob[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise FormatError(f"{path}: pixel payload truncated")
    return pixels.reshape(h, w)


def render_alignment(A, path):
    write_pgm(path, alignment_to_pixels(A))


# -- alignment experiment ------------------------------------------------------


def steps_to_threshold(diags, threshold=0.5, window=10):
    """First step at which the trailing ``window``-step mean of ``diags`` reaches ``threshold``."""
    diags = np.asarray(diags, dtype=np.float64)
    if diags.size < window:
        return None
    smooth = np.convolve(diags, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(smooth >= threshold)
    return int(hit[0] + window) if hit.size else None


@dataclass
class ExperimentReport:
    steps: int
    guided_steps: int | None
    unguided_steps: int | None
    threshold: float

    @property
    def ratio(self):
        """Unguided over guided steps; an arm that never crossed counts as the full budget."""
        if self.guided_steps is None:
            return None
        unguided = self.unguided_steps if self.unguided_steps is not None else self.steps
        return unguided / self.guided_steps

    @property
    def censored(self):
        return self.unguided_steps is None

    def __str__(self):
        fmt = lambda s: str(s) if s is not None else f">{self.steps}"  # noqa: E731
        ratio = "n/a" if self.ratio is None else f"{'>=' if self.censored else ''}{self.ratio:.2f}"
        return (
            f"guided_steps_to_diag>={self.threshold}: {fmt(self.guided_steps)}\n"
            f"unguided_steps_to_diag>={self.threshold}: {fmt(self.unguided_steps)}\n"
            f"ratio: {ratio}"
        )


def align_experiment(cfg, corpus, steps, out_dir=None, threshold=0.5, snapshot_every=None, parallel=False):
    """Train identically seeded guided and unguided models and compare alignment speed.

    Each arm writes ``train.log`` and alignment snapshots (MSPC and PGM) to
    ``out_dir/guided`` and ``out_dir/unguided`` at matched steps.
    """
    out_dir = Path(out_dir) if out_dir else None
    snapshot_every = snapshot_every or max(1, steps // 10)
    results = {}

    def arm(name, guided):
        arm_dir = out_dir / name if out_dir else None
        if arm_dir:
            arm_dir.mkdir(parents=True, exist_ok=True)
            (arm_dir / "train.log").write_text("")
        trainer = training.Trainer(cfg.replace(checkpoint_every=0), corpus, with_guided=guided, out_dir=arm_dir)
        for _ in range(steps):
            rec = trainer.train_step()
            if arm_dir:
                with open(arm_dir / "train.log", "a", encoding="utf-8") as fh:
                    fh.write(training.format_log_line(rec) + "\n")
                if trainer.step % snapshot_every == 0 or trainer.step == steps:
                    stem = arm_dir / f"alignment_{trainer.step:07d}"
                    training.save_alignment(stem.with_suffix(".mspc"), trainer.last_alignment)
                    render_alignment(trainer.last_alignment, stem.with_suffix(".pgm"))
        results[name] = [r["diag"] for r in trainer.records]

    arms = [("guided", True), ("unguided", False)]
    if parallel:
        errors = []

        def guarded(name, guided):
            try:
                arm(name, guided)
            except BaseException as e:  # re-raised on the calling thread below
                errors.append(e)

        threads = [threading.Thread(target=guarded, args=a) for a in arms]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
    else:
        for a in arms:
            arm(*a)
    report = ExperimentReport(
        steps,
        steps_to_threshold(results["guided"], threshold),
        steps_to_threshold(results["unguided"], threshold),
        threshold,
    )
    if out_dir:
        (out_dir / "report.txt").write_text(str(report) + "\n", encoding="utf-8")
    return report


# -- gradient audit ------------------------------------------------------------

GRADCHECK_TOL = 1e-4


def _rand(rng, *shape, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(out, C):
    """Scalar ``sum(out * C)`` so every output entry gets a distinct upstream gradient."""
    return ad.sum(ad.mul(out, ad.Tensor(C)))


# Spread of the random test point around the initializer. Larger values keep
# the sampled gradients well above finite-difference round-off.
_PERTURB = 0.3
# Minimum distance of every prenet ReLU input from zero at the test point, so
# a central difference never straddles the kink.
_KINK_MARGIN = 1e-2


def _prenet_margin(params, batch, cfg):
    """Smallest |pre-activation| over the prenet inputs seen under full teacher forcing."""
    B = batch.size
    groups = batch.mel_targets.reshape(B, -1, cfg.r * cfg.n_mels)
    x = np.concatenate([np.zeros((B, 1, groups.shape[2])), groups[:, :-1]], axis=1)
    margin = np.inf
    i = 0
    while f"decoder.prenet.{i}.W" in params:
        pre = x @ params[f"decoder.prenet.{i}.W"].data.T + params[f"decoder.prenet.{i}.b"].data
        margin = min(margin, float(np.abs(pre).min()))
        x = np.maximum(pre, 0.0)
        i += 1
    return margin


def tiny_model_config():
    return model.ModelConfig(vocab_size=7, d=4, r=2, n_mels=3, n_bins=5, prenet_dims=(6, 6), postnet_dim=5, prenet_dropout=0.0)


def tiny_batch(rng, cfg, lengths=((4, 6), (3, 3))):
    """Random batch for gradient checks; ``lengths`` lists ``(chars, frames)`` per item."""
    utts = []
    for i, (n, t) in enumerate(lengths):
        ids = rng.integers(1, cfg.vocab_size, size=n)
        utts.append(data.Utterance(str(i), "", ids, rng.random((t, cfg.n_mels)), rng.random((t, cfg.n_bins))))
    return data.make_batch(utts, cfg.r, np.float64)


def gradcheck_components(seed, eps=1e-4, max_entries=40):
    """Maximum relative gradient error per component for one seed (64-bit)."""
    rng = np.random.default_rng(seed)
    results = {}

    def check(name, f, params):
        errs = grad_check_params(f, params, eps=eps, max_entries=max_entries, rng=rng)
        results[name] = max(errs.values())

    C = rng.standard_normal((3, 2))
    check("matmul", lambda p: _weighted(ad.matmul(p["a"], p["b"]), C), {"a": _rand(rng, 3, 4), "b": _rand(rng, 4, 2)})
    C3 = rng.standard_normal((2, 3, 2))
    check("matmul_batched", lambda p: _weighted(ad.matmul(p["a"], p["b"]), C3), {"a": _rand(rng, 2, 3, 4), "b": _rand(rng, 2, 4, 2)})
    mask = np.array([[True, True, False, True], [True, False, True, True], [True, True, True, True]])
    C = rng.standard_normal((3, 4))
    check("softmax_rows", lambda p: _weighted(ad.softmax_rows(p["x"], 1.7, mask), C), {"x": _rand(rng, 3, 4)})
    C = rng.standard_normal((3, 4))
    for op in ("add", "sub", "mul"):
        fn = getattr(ad, op)
        check(op, lambda p, fn=fn: _weighted(fn(p["a"], p["b"]), C), {"a": _rand(rng, 3, 4), "b": _rand(rng, 3, 4)})
    for op in ("tanh", "sigmoid", "exp", "relu"):
        fn = getattr(ad, op)
        check(op, lambda p, fn=fn: _weighted(fn(p["x"]), C), {"x": _rand(rng, 3, 4)})
    C = rng.standard_normal((3, 7))
    check("concat", lambda p: _weighted(ad.concat([p["a"], p["b"]], axis=1), C), {"a": _rand(rng, 3, 4), "b": _rand(rng, 3, 3)})
    C = rng.standard_normal((2, 3, 4))
    check("stack", lambda p: _weighted(ad.stack([p["a"], p["b"]], axis=0), C), {"a": _rand(rng, 3, 4), "b": _rand(rng, 3, 4)})
    C = rng.standard_normal((4, 2))
    check("take_reshape_transpose", lambda p: _weighted(ad.transpose(ad.reshape(p["x"][:, 1:3], (2, 4))), C), {"x": _rand(rng, 4, 4)})
    ids = np.array([[1, 3, 1], [0, 2, 3]])
    C = rng.standard_normal((2, 3, 5))
    check("embedding", lambda p: _weighted(ad.embedding(p["W"], ids), C), {"W": _rand(rng, 4, 5)})
    C = rng.standard_normal((3, 5))
    check("affine", lambda p: _weighted(ad.affine(p["x"], p["W"], p["b"]), C), {"x": _rand(rng, 3, 4), "W": _rand(rng, 5, 4), "b": _rand(rng, 5)})
    target = rng.random((3, 4))
    mmask = rng.random((3, 4)) > 0.3
    check("masked_mse", lambda p: ad.masked_mse(p["x"], target, mmask), {"x": _rand(rng, 3, 4)})
    y = (rng.random((3, 4)) > 0.5).astype(float)
    check("bce_with_logits", lambda p: ad.bce_with_logits(p["z"], y, mmask, pos_weight=5.0), {"z": _rand(rng, 3, 4)})

    d, d_in = 5, 4
    cell = Params()
    cell.add_gru("g", d_in, d, rng, np.float64)
    cell = {k: ad.Tensor(v.data + 0.1 * rng.standard_normal(v.shape), requires_grad=True) for k, v in cell.sub("g").items()}
    x, h = rng.standard_normal((2, d_in)), rng.standard_normal((2, d))
    C = rng.standard_normal((2, d))

    def gru_loss(p):
        return _weighted(gru_cell(p["x"], p["h"], p), C)

    check("gru_cell", gru_loss, {**cell, "x": ad.Tensor(x), "h": ad.Tensor(h)})

    cfg = tiny_model_config()
    batch = tiny_batch(rng, cfg)
    base = model.init_params(cfg, seed, np.float64)
    while True:
        params = base.copy()
        for p in params.values():
            p.data += _PERTURB * rng.standard_normal(p.shape)
        if _prenet_margin(params, batch, cfg) > _KINK_MARGIN:
            break
    enc_params = {k: v for k, v in params.items() if k.startswith("encoder.")}
    Ck = rng.standard_normal((batch.size, batch.char_ids.shape[1], cfg.d))
    Cv = rng.standard_normal(Ck.shape)

    def enc_loss(p):
        out = model.encode_batch(batch.char_ids, batch.char_lengths, p)
        return ad.add(_weighted(out.keys, Ck * out.mask[..., None]), _weighted(out.values, Cv))

    check("encoder", enc_loss, enc_params)

    enc = {k: _rand(rng, batch.size, 4, cfg.d, scale=0.7) for k in ("keys", "values")}
    kmask = np.array([[True] * 4, [True, True, True, False]])
    Cc = rng.standard_normal((batch.size, cfg.d))
    Cw = rng.standard_normal((batch.size, 4))

    def attn_loss(p):
        q = attention.compute_query(p["dh"], p["ah"], p)
        ctx, w = attention.attend(q, p["keys"], p["values"], kmask)
        return ad.add(_weighted(ctx, Cc), _weighted(w, Cw))

    attn_params = {
        "decoder.query.W": params["decoder.query.W"],
        "decoder.query.b": params["decoder.query.b"],
        "dh": _rand(rng, batch.size, cfg.d),
        "ah": _rand(rng, batch.size, cfg.d),
        **enc,
    }
    check("attention", attn_loss, attn_params)

    def step_loss(p):
        out = model.forward(batch, p, cfg, tf_ratio=1.0, rng=None)
        loss, _ = training.total_loss(out, batch, guided_weight=1.0, g=0.2, pos_weight=5.0)
        return loss

    def step_terms(p):
        out = model.forward(batch, p, cfg, tf_ratio=1.0, rng=None)
        return training.loss_terms(out, batch, guided_weight=1.0, g=0.2, pos_weight=5.0)

    errs = grad_check_params(step_loss, params, eps=eps, max_entries=max_entries, rng=rng, terms=step_terms)
    for name, err in errs.items():
        results[f"decode_loss:{name}"] = err
    return results


def run_gradcheck(seeds=range(10), eps=1e-4, max_entries=40):
    """Worst error per component across ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, err in gradcheck_components(seed, eps, max_entries).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
