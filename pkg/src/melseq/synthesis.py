"""Free-running synthesis from text with stop-token termination and incremental attention forcing."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from melseq import audio, data, model
from melseq.errors import InputError, MelseqError, VersionError
from melseq.model import attention
from melseq.model.decoder import decode_step, dropout_masks, initial_state


@dataclass
class SynthesisOptions:
    max_steps: int = 200
    forced_incremental: bool = True
    strict_band: bool = False
    stop_threshold: float = 0.5
    seed: int = 0
    griffin_lim_iters: int = 60
    render_audio: bool = True
    audio_config: audio.AudioConfig = field(default_factory=audio.AudioConfig)


@dataclass
class SynthesisResult:
    """Outputs of one synthesis run.

    ``mel`` is ``(T, n_mels)`` and ``linear`` ``(T, n_bins)`` on the
    normalized scale; ``alignment`` is ``(N chars, steps)``. ``stop_step`` is
    the 1-based step at which the stop token fired, or ``None`` when the run
    hit ``max_steps`` (then ``hit_max_steps`` is true).
    """

    text: str
    mel: np.ndarray
    linear: np.ndarray
    alignment: np.ndarray
    positions: np.ndarray
    stop_step: int | None
    hit_max_steps: bool
    waveform: audio.Waveform | None

    @property
    def n_steps(self):
        return self.alignment.shape[1]


@dataclass
class SynthesisFailure:
    index: int
    text: str
    error: Exception


def check_compatible(ckpt):
    """Raise :class:`VersionError` unless the checkpoint's tensors fit its declared architecture."""
    cfg = ckpt.model_config
    if len(ckpt.vocab) != cfg.vocab_size:
        raise VersionError(f"checkpoint vocabulary has {len(ckpt.vocab)} symbols, model expects {cfg.vocab_size}")
    template = model.init_params(cfg, 0, np.float64)
    if list(template) != list(ckpt.params):
        raise VersionError("checkpoint parameter names do not match the model layout")
    for name, t in template.items():
        if ckpt.params[name].shape != t.shape:
            raise VersionError(f"{name}: checkpoint shape {ckpt.params[name].shape}, model expects {t.shape}")


def _forcer(strict_band):
    def force(weights, n_prev):
        out = np.empty_like(weights)
        pos = np.empty(len(weights), dtype=np.int64)
        for i in range(len(weights)):
            out[i], pos[i] = attention.force_incremental(weights[i], n_prev[i], strict_band)
        return out, pos

    return force


def synthesize_ids(char_ids, params, cfg, opts=SynthesisOptions()):
    """Decode from an encoded id sequence; see :func:`synthesize`."""
    if opts.max_steps < 1:
        raise InputError(f"max_steps must be >= 1, got {opts.max_steps}")
    dtype = params["decoder.mel.W"].dtype
    rng = np.random.default_rng(opts.seed)
    enc = model.encode(char_ids, params)
    state = initial_state(1, cfg, dtype)
    prev = np.zeros((1, cfg.r * cfg.n_mels), dtype=dtype)
    force = _forcer(opts.strict_band) if opts.forced_incremental else None
    mels, lins, cols, positions = [], [], [], []
    stop_step = None
    for step in range(1, opts.max_steps + 1):
        out = decode_step(state, enc, params, cfg, prev, dropout_masks(rng, 1, cfg, dtype), force)
        state = out.state
        mels.append(out.mel.data[0])
        lins.append(out.linear.data[0])
        cols.append(out.weights.data[0])
        positions.append(int(state.n_prev[0]))
        prev = out.mel.data
        if out.stop[0] > opts.stop_threshold:
            stop_step = step
            break
    mel = np.concatenate(mels).reshape(-1, cfg.n_mels)
    lin = np.concatenate(lins).reshape(-1, cfg.n_bins)
    return mel, lin, np.stack(cols, axis=1), np.array(positions), stop_step


def synthesize(text, ckpt, opts=SynthesisOptions()):
    """Text to spectrograms (and audio via Griffin-Lim on the linear head).

    With ``opts.forced_incremental`` each attention column is passed through
    :func:`~melseq.model.attention.force_incremental` before the context is
    read, so the forced position drives the rest of generation.
    """
    vocab = data.CharVocab(ckpt.vocab)
    if not text or not text.strip():
        raise InputError("text to synthesize is empty")
    norm = data.normalize_text(text, vocab)
    check_compatible(ckpt)
    cfg = ckpt.model_config
    mel, lin, A, pos, stop_step = synthesize_ids(vocab.encode(norm), ckpt.params, cfg, opts)
    wav = None
    if opts.render_audio:
        acfg = opts.audio_config
        mags = audio.denormalize_linear(lin.astype(np.float64), acfg)
        if mags.shape[1] != acfg.n_bins:
            raise VersionError(f"model predicts {mags.shape[1]} bins, audio config expects {acfg.n_bins}")
        samples = audio.griffin_lim(mags, opts.griffin_lim_iters, acfg)
        wav = audio.Waveform(np.clip(samples, -1.0, 1.0), acfg.sample_rate)
    return SynthesisResult(norm, mel, lin, A, pos, stop_step, stop_step is None, wav)


def batch_synthesize(texts, ckpt, opts=SynthesisOptions(), workers=1):
    """Synthesize each text independently; failures are returned in place, not raised.

    Every item uses its own RNG stream seeded from ``opts.seed``, so results
    match sequential :func:`synthesize` calls regardless of ``workers``.
    """

    def run(item):
        i, text = item
        try:
            return synthesize(text, ckpt, opts)
        except MelseqError as e:
            return SynthesisFailure(i, text, e)

    items = list(enumerate(texts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]
