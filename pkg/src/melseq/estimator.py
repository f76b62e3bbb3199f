"""scikit-learn style wrappers around the feature pipeline, the vocoder and the model.

The estimators are thin: hyper-parameters live in ``__init__`` (so
``get_params``/``set_params``/``clone`` work), fitted state carries a
trailing underscore, and every entry point validates its input first.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from melseq import audio, data, synthesis, training
from melseq.errors import InputError

# -- validation helpers --------------------------------------------------------


def check_texts(X):
    """Return ``X`` as a list of non-empty strings."""
    if isinstance(X, str):
        raise InputError("expected a sequence of texts, got a single string")
    texts = list(X)
    if not texts:
        raise InputError("no texts given")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise InputError(f"text {i} is {type(t).__name__}, expected str")
        if not t.strip():
            raise InputError(f"text {i} is empty")
    return texts


def check_waveform(x, name="waveform"):
    """1-D finite float64 samples from an array or :class:`~melseq.audio.Waveform`."""
    arr = np.asarray(x.samples if isinstance(x, audio.Waveform) else x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite samples")
    return arr


def check_spectrogram(S, n_cols=None, name="spectrogram"):
    """2-D finite ``(frames, n_cols)`` float array."""
    arr = np.asarray(S, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InputError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise InputError(f"{name} has {arr.shape[1]} columns, expected {n_cols}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def _audio_config(est, n_mels=80):
    return audio.AudioConfig(
        sample_rate=est.sample_rate, n_fft=est.n_fft, hop_length=est.hop_length, win_length=est.n_fft, n_mels=n_mels
    )


# -- transformers --------------------------------------------------------------


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Waveforms to normalized ``mel`` or ``linear`` spectrograms (one array per input).

    Stateless: ``fit`` only records the output width.
    """

    def __init__(self, kind="mel", sample_rate=22050, n_fft=1024, hop_length=256, n_mels=80):
        self.kind = kind
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.hop_length = hop_length
        self.n_mels = n_mels

    def fit(self, X=None, y=None):
        if self.kind not in ("mel", "linear"):
            raise InputError(f"kind must be 'mel' or 'linear', got {self.kind!r}")
        cfg = _audio_config(self, self.n_mels)
        self.audio_config_ = cfg
        self.n_features_out_ = cfg.n_mels if self.kind == "mel" else cfg.n_bins
        self.filterbank_ = audio.mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
        return self

    def transform(self, X):
        check_is_fitted(self, "audio_config_")
        out = []
        for i, x in enumerate(X):
            mel, lin = data.extract_features(check_waveform(x, f"waveform {i}"), self.audio_config_, self.filterbank_)
            out.append(mel if self.kind == "mel" else lin)
        return out


class GriffinLimTransformer(TransformerMixin, BaseEstimator):
    """Normalized linear spectrograms back to waveforms by Griffin-Lim phase recovery."""

    def __init__(self, n_iter=60, momentum=0.9, sample_rate=22050, n_fft=1024, hop_length=256, normalized=True):
        self.n_iter = n_iter
        self.momentum = momentum
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.hop_length = hop_length
        self.normalized = normalized

    def fit(self, X=None, y=None):
        if self.n_iter < 1:
            raise InputError(f"n_iter must be >= 1, got {self.n_iter}")
        self.audio_config_ = _audio_config(self)
        return self

    def transform(self, X):
        check_is_fitted(self, "audio_config_")
        cfg = self.audio_config_
        out = []
        for i, S in enumerate(X):
            S = check_spectrogram(S, cfg.n_bins, f"spectrogram {i}")
            mags = audio.denormalize_linear(S, cfg) if self.normalized else S
            out.append(audio.griffin_lim(mags, self.n_iter, cfg, momentum=self.momentum))
        return out


# -- model ---------------------------------------------------------------------


class Seq2SeqTTS(BaseEstimator):
    """Text-to-spectrogram model with guided attention, trained by :meth:`fit`.

    ``fit(X, y)`` takes texts and, per text, either a waveform (1-D array or
    :class:`~melseq.audio.Waveform` at ``sample_rate``) or a ``(mel, linear)``
    pair of normalized spectrograms. ``predict`` returns mel spectrograms,
    ``synthesize`` waveforms.
    """

    def __init__(
        self,
        n_steps=1000,
        batch_size=8,
        lr=1e-4,
        d=256,
        r=5,
        guided_weight=1.0,
        guided_g=0.2,
        prenet_dropout=0.5,
        forced_incremental=True,
        max_decode_steps=200,
        griffin_lim_iters=60,
        sample_rate=22050,
        dtype="float32",
        seed=0,
    ):
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.d = d
        self.r = r
        self.guided_weight = guided_weight
        self.guided_g = guided_g
        self.prenet_dropout = prenet_dropout
        self.forced_incremental = forced_incremental
        self.max_decode_steps = max_decode_steps
        self.griffin_lim_iters = griffin_lim_iters
        self.sample_rate = sample_rate
        self.dtype = dtype
        self.seed = seed

    def _train_config(self):
        return training.TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            max_steps=self.n_steps,
            guided_weight=self.guided_weight,
            guided_g=self.guided_g,
            seed=self.seed,
            d=self.d,
            r=self.r,
            prenet_dim=self.d,
            postnet_dim=self.d,
            prenet_dropout=self.prenet_dropout,
            dtype=self.dtype,
            checkpoint_every=0,
        )

    def _utterances(self, texts, y, vocab):
        cfg = audio.AudioConfig(sample_rate=self.sample_rate)
        fb = audio.mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
        utts = []
        for i, (text, target) in enumerate(zip(texts, y)):
            if isinstance(target, tuple):
                mel = check_spectrogram(target[0], cfg.n_mels, f"mel {i}")
                lin = check_spectrogram(target[1], cfg.n_bins, f"linear {i}")
            else:
                if isinstance(target, audio.Waveform) and target.sample_rate != self.sample_rate:
                    raise InputError(f"waveform {i} is at {target.sample_rate} Hz, expected {self.sample_rate}")
                mel, lin = data.extract_features(check_waveform(target, f"waveform {i}"), cfg, fb)
            norm = data.normalize_text(text, vocab)
            utts.append(data.Utterance(str(i), norm, vocab.encode(norm), mel, lin))
        return utts

    def fit(self, X, y):
        texts = check_texts(X)
        y = list(y)
        if len(y) != len(texts):
            raise InputError(f"{len(texts)} texts but {len(y)} targets")
        vocab = data.DEFAULT_VOCAB
        corpus = self._utterances(texts, y, vocab)
        cfg = self._train_config()
        trainer = training.Trainer(cfg, corpus, vocab, with_guided=self.guided_weight > 0)
        trainer.run(self.n_steps)
        self.checkpoint_ = trainer.checkpoint()
        self.history_ = list(trainer.records)
        self.n_params_ = trainer.params.count()
        return self

    @classmethod
    def from_checkpoint(cls, path_or_ckpt, **kw):
        """Wrap a saved checkpoint as a fitted estimator."""
        ckpt = path_or_ckpt if isinstance(path_or_ckpt, training.Checkpoint) else training.load_checkpoint(path_or_ckpt)
        synthesis.check_compatible(ckpt)
        c = ckpt.config
        est = cls(
            n_steps=ckpt.step, batch_size=c.batch_size, lr=c.lr, d=c.d, r=c.r, guided_weight=c.guided_weight,
            guided_g=c.guided_g, prenet_dropout=c.prenet_dropout, dtype=c.dtype, seed=c.seed, **kw,
        )
        est.checkpoint_ = ckpt
        est.history_ = []
        est.n_params_ = ckpt.params.count()
        return est

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        training.save_checkpoint(path, self.checkpoint_)

    def _options(self, render_audio):
        return synthesis.SynthesisOptions(
            max_steps=self.max_decode_steps,
            forced_incremental=self.forced_incremental,
            seed=self.seed,
            griffin_lim_iters=self.griffin_lim_iters,
            render_audio=render_audio,
            audio_config=audio.AudioConfig(sample_rate=self.sample_rate),
        )

    def synthesize_results(self, X, render_audio=True):
        """Full :class:`~melseq.synthesis.SynthesisResult` per text."""
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("Seq2SeqTTS is not fitted; call fit or from_checkpoint first")
        return [synthesis.synthesize(t, self.checkpoint_, self._options(render_audio)) for t in check_texts(X)]

    def predict(self, X):
        """Mel spectrogram ``(frames, n_mels)`` per text."""
        return [res.mel for res in self.synthesize_results(X, render_audio=False)]

    def synthesize(self, X):
        """Waveform samples per text."""
        return [res.waveform.samples for res in self.synthesize_results(X, render_audio=True)]
