"""Corpus ingestion: text normalization, character vocabulary, cached features, batching.

Corpora follow the LJSpeech layout: ``metadata.csv`` with pipe-delimited
``id|raw|normalized`` lines next to a ``wavs/`` directory of ``<id>.wav``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from melseq import audio
from melseq.errors import CorpusError, EmptyTextError, InputError, VocabError

log = logging.getLogger(__name__)

PAD = "_"
EOS = "~"
LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"
PUNCTUATION = "!'\"(),-.:;?"
_TRANSLATE = {
    "‘": "'",
    "’": "'",
    "‚": "'",
    "‛": "'",
    "“": '"',
    "”": '"',
    "„": '"',
    "‐": "-",
    "‑": "-",
    "‒": "-",
    "–": "-",
    "\u2014": "-",
    "―": "-",
    "−": "-",
}


class CharVocab:
    """Character inventory with id 0 reserved for padding."""

    def __init__(self, symbols=None):
        if symbols is None:
            symbols = [PAD, EOS, *LETTERS, *DIGITS, " ", *PUNCTUATION]
        symbols = list(symbols)
        if symbols[0] != PAD or EOS not in symbols:
            raise ValueError("vocabulary must start with the pad symbol and contain eos")
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    @property
    def pad_id(self):
        return 0

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def text_symbols(self):
        return set(self.symbols) - {PAD, EOS}

    def encode(self, s):
        """Per-character ids followed by the eos id."""
        try:
            ids = [self.index[c] for c in s if c not in (PAD, EOS)]
        except KeyError as e:
            raise VocabError(f"character {e.args[0]!r} is not in the vocabulary") from None
        if len(ids) != len(s):
            raise VocabError("reserved pad/eos symbols cannot appear in text")
        return ids + [self.eos_id]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            if not 0 <= i < len(self.symbols):
                raise VocabError(f"id {i} is out of range for a vocabulary of {len(self)}")
            out.append(self.symbols[i])
        return "".join(out)


DEFAULT_VOCAB = CharVocab()


def normalize_text(s, vocab=DEFAULT_VOCAB):
    """Lowercase, map typographic quotes/dashes to ASCII, drop unknown chars, squeeze spaces."""
    s = s.translate(str.maketrans(_TRANSLATE)).lower()
    s = unicodedata.normalize("NFC", s)
    allowed = vocab.text_symbols
    s = "".join(c if c in allowed else (" " if c.isspace() else "") for c in s)
    s = re.sub(r" +", " ", s).strip()
    if not s:
        raise EmptyTextError("text is empty after normalization")
    return s


def encode_text(s, vocab=DEFAULT_VOCAB):
    return vocab.encode(s)


# -- corpus --------------------------------------------------------------------


def load_metadata(corpus_dir):
    """Return ``(id, text)`` pairs from ``metadata.csv``, preferring the normalized column."""
    path = Path(corpus_dir) / "metadata.csv"
    if not path.is_file():
        raise FileNotFoundError(f"metadata file not found: {path}")
    rows, skipped = [], 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("|")
            if len(fields) < 2 or not fields[0].strip():
                skipped += 1
                log.warning("%s:%d: malformed metadata line skipped", path, lineno)
                continue
            text = fields[2] if len(fields) >= 3 and fields[2].strip() else fields[1]
            rows.append((fields[0].strip(), text))
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    if not rows:
        raise CorpusError(f"{path} contains no valid metadata lines")
    return rows


@dataclass
class Utterance:
    """One text/audio pair with model-ready features.

    ``mel`` is ``(T, n_mels)`` and ``linear`` is ``(T, n_bins)``, both on the
    normalized [0, 1] log scale.
    """

    id: str
    raw_text: str
    char_ids: np.ndarray
    mel: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        self.char_ids = np.asarray(self.char_ids, dtype=np.int64)
        if self.char_ids.size == 0:
            raise InputError(f"{self.id}: empty character sequence")
        if self.mel.shape[0] != self.linear.shape[0]:
            raise InputError(f"{self.id}: mel has {self.mel.shape[0]} frames, linear has {self.linear.shape[0]}")

    @property
    def n_frames(self):
        return self.mel.shape[0]


def extract_features(samples, cfg=audio.AudioConfig(), fb=None):
    """``(mel, linear)`` features of a waveform, both normalized to [0, 1]."""
    if fb is None:
        fb = audio.mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    lin = audio.stft(samples, cfg)
    return audio.to_mel(lin, fb, cfg), audio.normalize_linear(lin, cfg)


def default_cache_dir(corpus_dir):
    env = os.environ.get("MELSEQ_CACHE")
    return Path(env) if env else Path(corpus_dir) / ".melseq_cache"


def cached_features(wav_path, utt_id, cache_dir, cfg=audio.AudioConfig(), fb=None):
    """Load features from ``cache_dir`` or compute and store them.

    Entries are valid only while the WAV content hash and the DSP config
    hash recorded in ``<id>.key`` both match.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    blob = Path(wav_path).read_bytes()
    key = hashlib.sha256(blob).hexdigest() + ":" + cfg.digest()
    key_path = cache_dir / f"{utt_id}.key"
    mel_path = cache_dir / f"{utt_id}.mel.mspc"
    lin_path = cache_dir / f"{utt_id}.lin.mspc"
    if key_path.is_file() and mel_path.is_file() and lin_path.is_file():
        if key_path.read_text().strip() == key:
            return audio.read_mspc(mel_path), audio.read_mspc(lin_path)
    w = audio.wav_read(wav_path)
    if w.sample_rate != cfg.sample_rate:
        raise InputError(f"{wav_path}: sample rate {w.sample_rate}, expected {cfg.sample_rate}")
    mel, lin = extract_features(w.samples, cfg, fb)
    audio.write_mspc(mel_path, mel)
    audio.write_mspc(lin_path, lin)
    key_path.write_text(key + "\n")
    # round through float32 so fresh and cached loads are identical
    return audio.read_mspc(mel_path), audio.read_mspc(lin_path)


def load_corpus(corpus_dir, cfg=audio.AudioConfig(), vocab=DEFAULT_VOCAB, cache_dir=None, max_utts=None, workers=1):
    """Read an LJSpeech-layout corpus into :class:`Utterance` objects.

    ``max_utts`` keeps the K shortest utterances by audio length (ties
    broken by id), which is how desk-scale subsets are selected.
    """
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    rows = []
    for utt_id, text in load_metadata(corpus_dir):
        wav = corpus_dir / "wavs" / f"{utt_id}.wav"
        if not wav.is_file():
            log.warning("%s: missing audio %s, skipped", utt_id, wav)
            continue
        try:
            norm = normalize_text(text, vocab)
        except EmptyTextError:
            log.warning("%s: empty text after normalization, skipped", utt_id)
            continue
        rows.append((utt_id, norm, wav))
    if not rows:
        raise CorpusError(f"{corpus_dir}: no utterance has both text and audio")
    if max_utts is not None:
        rows.sort(key=lambda r: (audio.wav_num_frames(r[2]), r[0]))
        rows = rows[:max_utts]
    cache_dir = default_cache_dir(corpus_dir) if cache_dir is None else Path(cache_dir)
    fb = audio.mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)

    def build(row):
        utt_id, norm, wav = row
        mel, lin = cached_features(wav, utt_id, cache_dir, cfg, fb)
        return Utterance(utt_id, norm, vocab.encode(norm), mel, lin)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(build, rows))
    return [build(r) for r in rows]


# -- batching ------------------------------------------------------------------


@dataclass
class Batch:
    """Padded minibatch; time axes are frames-major.

    ``mel_targets`` is ``(B, T_max, n_mels)``, ``linear_targets`` is
    ``(B, T_max, n_bins)`` and ``stop_targets`` is ``(B, T_max // r)``.
    """

    ids: list
    char_ids: np.ndarray
    char_lengths: np.ndarray
    mel_targets: np.ndarray
    linear_targets: np.ndarray
    stop_targets: np.ndarray
    frame_lengths: np.ndarray
    char_mask: np.ndarray
    frame_mask: np.ndarray
    step_mask: np.ndarray
    r: int = 5
    extras: dict = field(default_factory=dict)

    @property
    def size(self):
        return len(self.ids)

    @property
    def n_steps(self):
        return self.stop_targets.shape[1]

    @property
    def step_lengths(self):
        return -(-self.frame_lengths // self.r)


def make_batch(utts, r=5, dtype=np.float32):
    """Pad utterances into a :class:`Batch` whose frame axis is a multiple of ``r``.

    The stop target is 0 for decode steps before the last one that covers
    real frames and 1 from that step on (padded steps included).
    """
    utts = list(utts)
    if not utts:
        raise InputError("make_batch needs at least one utterance")
    for u in utts:
        if u.n_frames == 0:
            raise InputError(f"{u.id}: utterance has zero frames")
    B = len(utts)
    n_max = max(len(u.char_ids) for u in utts)
    t_max = max(u.n_frames for u in utts)
    t_pad = math.ceil(t_max / r) * r
    n_mels, n_bins = utts[0].mel.shape[1], utts[0].linear.shape[1]

    char_ids = np.zeros((B, n_max), dtype=np.int64)
    mel = np.zeros((B, t_pad, n_mels), dtype=dtype)
    lin = np.zeros((B, t_pad, n_bins), dtype=dtype)
    stop = np.zeros((B, t_pad // r), dtype=dtype)
    char_len = np.array([len(u.char_ids) for u in utts], dtype=np.int64)
    frame_len = np.array([u.n_frames for u in utts], dtype=np.int64)
    for i, u in enumerate(utts):
        char_ids[i, : char_len[i]] = u.char_ids
        mel[i, : frame_len[i]] = u.mel
        lin[i, : frame_len[i]] = u.linear
        stop[i, math.ceil(frame_len[i] / r) - 1 :] = 1.0
    char_mask = np.arange(n_max)[None, :] < char_len[:, None]
    frame_mask = np.arange(t_pad)[None, :] < frame_len[:, None]
    step_mask = np.arange(t_pad // r)[None, :] < (-(-frame_len // r))[:, None]
    return Batch(
        ids=[u.id for u in utts],
        char_ids=char_ids,
        char_lengths=char_len,
        mel_targets=mel,
        linear_targets=lin,
        stop_targets=stop,
        frame_lengths=frame_len,
        char_mask=char_mask,
        frame_mask=frame_mask,
        step_mask=step_mask,
        r=r,
    )


# -- synthetic corpus ----------------------------------------------------------


def write_synthetic_corpus(out_dir, n_utts=200, seed=0, letters="abcdefghijkl", cfg=audio.AudioConfig()):
    """Write an LJSpeech-layout corpus of tone sequences, one tone per letter.

    Every letter has its own pitch and a characteristic duration; spaces are
    short silences. The text-to-audio alignment is therefore monotonic and
    learnable, which is all the alignment experiments need.
    """
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sr, hop = cfg.sample_rate, cfg.hop_length
    pitch = {c: 150.0 * 2.0 ** (i / len(letters) * 1.5) for i, c in enumerate(letters)}
    frames = {c: 3 + (i % 4) for i, c in enumerate(letters)}
    frames[" "] = 2
    lines = []
    for k in range(n_utts):
        words = []
        n_chars = int(rng.integers(6, 15))
        while sum(len(w) for w in words) + len(words) < n_chars:
            words.append("".join(rng.choice(list(letters), size=int(rng.integers(2, 6)))))
        text = " ".join(words)
        parts = [np.zeros(2 * hop)]
        for c in text:
            n = (frames[c] + int(rng.integers(0, 2))) * hop
            if c == " ":
                parts.append(np.zeros(n))
                continue
            t = np.arange(n) / sr
            tone = sum(np.sin(2 * np.pi * h * pitch[c] * t) / h for h in range(1, 6))
            ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.005 * sr))
            parts.append(0.25 * tone * ramp)
        parts.append(np.zeros(2 * hop))
        samples = np.concatenate(parts) + 1e-3 * rng.standard_normal(sum(len(p) for p in parts))
        utt_id = f"SYN{k:04d}"
        audio.wav_write(out / "wavs" / f"{utt_id}.wav", audio.Waveform(np.clip(samples, -1, 1), sr))
        lines.append(f"{utt_id}|{text}|{text}")
    (out / "metadata.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
