"""Spectrogram front end, Griffin-Lim inversion and the on-disk audio formats.

Spectrogram arrays are stored frames-major: a linear spectrogram has shape
``(T, n_fft // 2 + 1)`` and a mel spectrogram ``(T, n_mels)``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from melseq.errors import FormatError, InputError


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    amp_floor: float = 1e-5
    min_level_db: float = -100.0
    ref_level_db: float = 20.0
    griffin_lim_iters: int = 60
    griffin_lim_momentum: float = 0.9

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    def digest(self):
        """Short stable hash of every field; keys the feature cache."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


# -- STFT ----------------------------------------------------------------------


def hann_window(win_length, n_fft=None):
    """Periodic Hann window, zero-padded symmetrically to ``n_fft``."""
    n_fft = n_fft or win_length
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win_length) / win_length)
    if win_length < n_fft:
        left = (n_fft - win_length) // 2
        w = np.pad(w, (left, n_fft - win_length - left))
    return w


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def stft_complex(samples, cfg=AudioConfig()):
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < cfg.win_length:
        raise InputError(f"waveform of {len(x)} samples is shorter than one window ({cfg.win_length})")
    pad = cfg.n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.hop_length]
    frames = frames[: 1 + len(x) // cfg.hop_length]
    return np.fft.rfft(frames * hann_window(cfg.win_length, cfg.n_fft), axis=-1)


def stft(w, cfg=AudioConfig()):
    """Magnitude spectrogram, shape ``(1 + len // hop, n_fft // 2 + 1)``."""
    return np.abs(stft_complex(_samples(w), cfg))


def istft(spec, cfg=AudioConfig(), length=None):
    """Least-squares overlap-add inverse of :func:`stft_complex`."""
    n_frames = spec.shape[0]
    window = hann_window(cfg.win_length, cfg.n_fft)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1) * window
    total = cfg.n_fft + cfg.hop_length * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window * window
    for i in range(n_frames):
        s = i * cfg.hop_length
        out[s : s + cfg.n_fft] += frames[i]
        norm[s : s + cfg.n_fft] += wsq
    nz = norm > 1e-11
    out[nz] /= norm[nz]
    pad = cfg.n_fft // 2
    if length is None:
        length = cfg.hop_length * (n_frames - 1)
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


# -- mel scale -----------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr=22050, n_fft=1024, n_mels=80, fmin=0.0, fmax=8000.0):
    """Triangular filters with apexes equally spaced on the mel scale.

    Returns ``(n_mels, n_fft // 2 + 1)``. Each triangle rises from the
    previous filter's centre to its own centre (value 1) and falls to the
    next filter's centre.
    """
    if not 0 <= fmin < fmax <= sr / 2:
        raise InputError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}, sr={sr}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    # filters narrower than a bin would be empty; give them their nearest bin
    for k in np.flatnonzero(fb.max(axis=1) <= 0):
        fb[k, int(np.argmin(np.abs(freqs - edges[k + 1])))] = 1.0
    return fb


def amp_to_db(x, floor=1e-5):
    return 20.0 * np.log10(np.maximum(x, floor))


def db_to_amp(db):
    return 10.0 ** (np.asarray(db) / 20.0)


def normalize_db(db, cfg=AudioConfig()):
    span = cfg.ref_level_db - cfg.min_level_db
    return np.clip((db - cfg.min_level_db) / span, 0.0, 1.0)


def denormalize_db(x, cfg=AudioConfig()):
    span = cfg.ref_level_db - cfg.min_level_db
    return np.clip(x, 0.0, 1.0) * span + cfg.min_level_db


def mel_db(lin, fb, cfg=AudioConfig()):
    """Log-compressed mel energies in dB before normalization."""
    lin = np.asarray(lin)
    if lin.shape[-1] != fb.shape[1]:
        raise InputError(f"linear spectrogram has {lin.shape[-1]} bins, filterbank expects {fb.shape[1]}")
    return amp_to_db(lin @ fb.T, cfg.amp_floor)


def to_mel(lin, fb, cfg=AudioConfig()):
    """Normalized mel spectrogram in [0, 1], shape ``(T, n_mels)``."""
    return normalize_db(mel_db(lin, fb, cfg), cfg)


def normalize_linear(lin, cfg=AudioConfig()):
    """Map raw magnitudes to the [0, 1] log scale the model is trained on."""
    return normalize_db(amp_to_db(lin, cfg.amp_floor), cfg)


def denormalize_linear(x, cfg=AudioConfig()):
    return db_to_amp(denormalize_db(x, cfg))


# -- Griffin-Lim ---------------------------------------------------------------


def spectral_convergence(samples, mags, cfg=AudioConfig()):
    ref = np.linalg.norm(mags)
    if ref == 0:
        return 0.0
    est = stft(samples, cfg)
    n = min(len(est), len(mags))
    return float(np.linalg.norm(est[:n] - mags[:n]) / ref)


def griffin_lim(mags, iters=60, cfg=AudioConfig(), checkpoint_every=None, momentum=None):
    """Recover a waveform whose STFT magnitude approximates ``mags``.

    Starts from zero phase and alternates inverse-STFT / STFT projections.
    ``momentum`` (default ``cfg.griffin_lim_momentum``) extrapolates the phase
    estimate as in the fast Griffin-Lim variant; 0 gives the classic update.
    With ``checkpoint_every`` set, also returns ``(iteration, spectral
    convergence)`` pairs recorded at iteration 1 and every
    ``checkpoint_every`` iterations after that.
    """
    if iters < 1:
        raise InputError(f"iters must be >= 1, got {iters}")
    alpha = cfg.griffin_lim_momentum if momentum is None else momentum
    mags = np.asarray(mags, dtype=np.float64)
    length = cfg.hop_length * (mags.shape[0] - 1)
    marks = [i for i in range(1, iters + 1) if checkpoint_every and (i == 1 or i % checkpoint_every == 0)]
    if not np.any(mags) or length < cfg.win_length:
        samples = istft(mags.astype(np.complex128), cfg, length)
        trace = [(i, spectral_convergence(samples, mags, cfg) if length >= cfg.win_length else 0.0) for i in marks]
        return (samples, trace) if checkpoint_every else samples
    phase = np.ones_like(mags, dtype=np.complex128)
    prev = None
    trace = []
    for i in range(1, iters + 1):
        rebuilt = stft_complex(istft(mags * phase, cfg, length), cfg)[: len(mags)]
        step = rebuilt if prev is None else rebuilt - (alpha / (1.0 + alpha)) * prev
        prev = rebuilt
        mag = np.abs(step)
        phase = np.where(mag > 1e-12, step / np.maximum(mag, 1e-12), 1.0)
        if i in marks:
            trace.append((i, spectral_convergence(istft(mags * phase, cfg, length), mags, cfg)))
    samples = istft(mags * phase, cfg, length)
    return (samples, trace) if checkpoint_every else samples


# -- WAV -----------------------------------------------------------------------


def wav_read(path):
    """Read a 16-bit PCM mono RIFF/WAVE file."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise FormatError(f"{path}: channels={f.getnchannels()}, expected 1 (mono)")
            if f.getsampwidth() != 2:
                raise FormatError(f"{path}: sample width={8 * f.getsampwidth()} bits, expected 16")
            if f.getcomptype() != "NONE":
                raise FormatError(f"{path}: compression={f.getcomptype()}, expected PCM")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: not a PCM RIFF/WAVE file ({e})") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def wav_write(path, w):
    samples = np.clip(_samples(w), -1.0, 1.0)
    q = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    rate = w.sample_rate if isinstance(w, Waveform) else AudioConfig.sample_rate
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(rate))
        f.writeframes(q.tobytes())


def wav_num_frames(path):
    with wave.open(str(path), "rb") as f:
        return f.getnframes()


# -- MSPC spectrogram cache ----------------------------------------------------

MSPC_MAGIC = b"MSPC"
MSPC_VERSION = 1
_MSPC_HEADER = struct.Struct("<4sIII")


def write_mspc(path, matrix):
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise InputError(f"MSPC stores 2-D matrices, got shape {m.shape}")
    path = Path(path)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as f:
        f.write(_MSPC_HEADER.pack(MSPC_MAGIC, MSPC_VERSION, m.shape[0], m.shape[1]))
        f.write(m.tobytes())
    tmp.replace(path)


def read_mspc(path):
    blob = Path(path).read_bytes()
    if len(blob) < _MSPC_HEADER.size:
        raise FormatError(f"{path}: file too short for an MSPC header")
    magic, version, rows, cols = _MSPC_HEADER.unpack_from(blob)
    if magic != MSPC_MAGIC:
        raise FormatError(f"{path}: magic={magic!r}, expected {MSPC_MAGIC!r}")
    if version != MSPC_VERSION:
        raise FormatError(f"{path}: version={version}, expected {MSPC_VERSION}")
    body = blob[_MSPC_HEADER.size :]
    if len(body) != 4 * rows * cols:
        raise FormatError(f"{path}: payload holds {len(body)} bytes, header promises {4 * rows * cols}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).copy()
