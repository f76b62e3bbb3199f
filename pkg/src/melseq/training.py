"""Loss composition, optimizer, training loop and checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from melseq import data, model
from melseq.autodiff import Params, Tape
from melseq.autodiff import engine as ad
from melseq.errors import ChecksumError, FormatError, InputError, VersionError
from melseq.model import attention

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 300
    max_steps: int = 0
    tf_start: float = 1.0
    tf_end: float = 0.2
    tf_anneal_epochs: int = 300
    guided_weight: float = 1.0
    guided_g: float = 0.2
    grad_clip: float = 1.0
    stop_pos_weight: float = 5.0
    seed: int = 0
    d: int = 256
    r: int = 5
    prenet_dim: int = 256
    postnet_dim: int = 256
    prenet_dropout: float = 0.5
    literal_query_feed: bool = False
    dtype: str = "float32"
    diag_band: float = 0.1
    checkpoint_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise InputError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.tf_end <= self.tf_start <= 1.0:
            raise InputError(f"need 0 <= tf_end <= tf_start <= 1, got {self.tf_start}, {self.tf_end}")
        if self.guided_weight < 0:
            raise InputError(f"guided_weight must be >= 0, got {self.guided_weight}")

    def model_config(self, vocab_size):
        return model.ModelConfig(
            vocab_size=vocab_size,
            d=self.d,
            r=self.r,
            prenet_dims=(self.prenet_dim, self.prenet_dim),
            postnet_dim=self.postnet_dim,
            prenet_dropout=self.prenet_dropout,
            literal_query_feed=self.literal_query_feed,
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    kw[key] = value.lower() in ("true", "1", "yes")
                elif kind == "int":
                    kw[key] = int(value)
                elif kind == "float":
                    kw[key] = float(value)
                else:
                    kw[key] = value
            except ValueError:
                raise FormatError(f"config line {lineno}: bad {kind} value for {key}: {value!r}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def teacher_forcing_ratio(epoch, cfg):
    """Linearly annealed teacher-forcing probability, clamped at ``tf_end``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if cfg.tf_anneal_epochs <= 0:
        return cfg.tf_end
    return max(cfg.tf_end, cfg.tf_start - (cfg.tf_start - cfg.tf_end) * epoch / cfg.tf_anneal_epochs)


# -- loss ----------------------------------------------------------------------


def total_loss(out, batch, guided_weight=1.0, g=0.2, pos_weight=5.0):
    """Sum of masked mel MSE, linear MSE, stop BCE and the weighted guided-attention term.

    Returns ``(loss_tensor, parts)`` where ``parts`` holds float values of
    each component; ``parts["attn"]`` is ``None`` when the guided term is
    switched off (``guided_weight == 0``).
    """
    n_mels = out.mel.shape[-1]
    n_bins = out.linear.shape[-1]
    if out.mel.shape[:2] != batch.mel_targets.shape[:2]:
        raise InputError(f"prediction {out.mel.shape} and target {batch.mel_targets.shape} disagree")
    fm = batch.frame_mask[..., None]
    mel = ad.masked_mse(out.mel, batch.mel_targets, np.broadcast_to(fm, fm.shape[:2] + (n_mels,)))
    lin = ad.masked_mse(out.linear, batch.linear_targets, np.broadcast_to(fm, fm.shape[:2] + (n_bins,)))
    stop = ad.bce_with_logits(out.stop_logits, batch.stop_targets, pos_weight=pos_weight)
    loss = ad.add(ad.add(mel, lin), stop)
    parts = {"mel": float(mel.data), "lin": float(lin.data), "stop": float(stop.data), "attn": None}
    if guided_weight > 0:
        A = out.alignments
        W, valid = attention.batch_guide(batch.char_lengths, batch.step_lengths, A.shape[2], A.shape[1], g)
        attn = attention.guided_attention_loss(A, W, valid)
        loss = ad.add(loss, ad.mul(attn, guided_weight))
        parts["attn"] = float(attn.data)
    return loss, parts


def loss_terms(out, batch, guided_weight=1.0, g=0.2, pos_weight=5.0):
    """Per-cell contributions whose grand total equals :func:`total_loss` (float arrays, no tape).

    Finite-difference checks subtract these cell by cell before summing, so
    the difference of two nearby losses is never rounded at the scale of the
    whole loss.
    """
    fm = np.broadcast_to(batch.frame_mask[..., None], batch.frame_mask.shape + (1,))
    terms = []
    for pred, target in ((out.mel.data, batch.mel_targets), (out.linear.data, batch.linear_targets)):
        m = np.broadcast_to(fm, pred.shape)
        diff = np.where(m, pred - target, 0.0)
        terms.append(diff * diff / max(int(m.sum()), 1))
    z = out.stop_logits.data
    y = np.asarray(batch.stop_targets, dtype=z.dtype)
    soft = np.log1p(np.exp(-np.abs(z)))
    per = pos_weight * y * (soft + np.maximum(-z, 0.0)) + (1.0 - y) * (soft + np.maximum(z, 0.0))
    terms.append(per / z.size)
    if guided_weight > 0:
        A = out.alignments.data
        W, valid = attention.batch_guide(batch.char_lengths, batch.step_lengths, A.shape[2], A.shape[1], g)
        terms.append(guided_weight * np.where(valid, A * W, 0.0) / max(int(valid.sum()), 1))
    return terms


# -- optimizer -----------------------------------------------------------------


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def adam_step(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update applied in place; ``t`` is the 1-based step count."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.dtype, copy=False)


# -- log format ----------------------------------------------------------------

LOG_FIELDS = ("mel", "lin", "stop", "attn", "diag", "tf")


def format_log_line(rec):
    parts = [f"step={rec['step']}"]
    for k in LOG_FIELDS:
        if rec.get(k) is not None:
            parts.append(f"{k}={rec[k]:.6f}")
    return " ".join(parts)


def parse_log_line(line):
    """Inverse of :func:`format_log_line`; a missing ``attn`` field reads as 0."""
    rec = {}
    for tok in line.split():
        key, _, value = tok.partition("=")
        rec[key] = int(value) if key == "step" else float(value)
    rec.setdefault("attn", 0.0)
    return rec


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"MSQK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    config: TrainConfig
    model_config: model.ModelConfig
    params: Params
    vocab: list
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    order: list = field(default_factory=list)
    position: int = 0
    skipped_steps: int = 0
    version: int = CKPT_VERSION


def save_checkpoint(path, ckpt):
    """Write ``ckpt`` atomically (temp file then rename)."""
    tensors = []
    for prefix, table in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in table.items():
            arr = arr.data if isinstance(arr, ad.Tensor) else arr
            tensors.append((f"{prefix}/{name}", np.ascontiguousarray(arr)))
    table, offset = [], 0
    for name, arr in tensors:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": le.nbytes})
        offset += le.nbytes
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "model_config": ckpt.model_config.to_dict(),
        "vocab": list(ckpt.vocab),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "order": [int(i) for i in ckpt.order],
        "position": ckpt.position,
        "skipped_steps": ckpt.skipped_steps,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(_CKPT_HEAD.pack(CKPT_MAGIC, ckpt.version, len(head)))
    body += head
    for _, arr in tensors:
        body += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEAD.size + 4:
        raise ChecksumError(f"{path}: file truncated ({len(blob)} bytes)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch, file is corrupt or truncated")
    magic, version, head_len = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: magic={magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    start = _CKPT_HEAD.size
    header = json.loads(blob[start : start + head_len].decode("utf-8"))
    base = start + head_len
    params, m, v = Params(), {}, {}
    for entry in header["tensors"]:
        raw = blob[base + entry["offset"] : base + entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        prefix, name = entry["name"].split("/", 1)
        if prefix == "param":
            params[name] = ad.Tensor(arr, requires_grad=True, name=name)
        elif prefix == "adam_m":
            m[name] = arr
        else:
            v[name] = arr
    return Checkpoint(
        config=TrainConfig(**header["config"]),
        model_config=model.ModelConfig.from_dict(header["model_config"]),
        params=params,
        vocab=header["vocab"],
        adam_m=m,
        adam_v=v,
        step=header["step"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        order=header["order"],
        position=header["position"],
        skipped_steps=header["skipped_steps"],
        version=version,
    )


# -- training loop -------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


class Trainer:
    """Stateful training run over an in-memory corpus.

    A single ``numpy.random.Generator`` seeded from ``cfg.seed`` drives batch
    order, teacher-forcing coin flips and prenet dropout, so a run is fully
    determined by its config and corpus.
    """

    def __init__(self, cfg, corpus, vocab=data.DEFAULT_VOCAB, with_guided=True, out_dir=None, params=None):
        if not corpus:
            raise InputError("training corpus is empty")
        self.cfg = cfg if with_guided else cfg.replace(guided_weight=0.0)
        self.corpus = list(corpus)
        self.vocab = vocab
        self.model_config = self.cfg.model_config(len(vocab))
        dtype = self.cfg.np_dtype
        self.params = params if params is not None else model.init_params(self.model_config, self.cfg.seed, dtype)
        self.adam_m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.adam_v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step = 0
        self.epoch = 0
        self.order = []
        self.position = 0
        self.skipped_steps = 0
        self.records = []
        self.out_dir = Path(out_dir) if out_dir else None
        self.last_alignment = None

    # state -------------------------------------------------------------------

    def checkpoint(self):
        return Checkpoint(
            config=self.cfg,
            model_config=self.model_config,
            params=self.params,
            vocab=self.vocab.symbols,
            adam_m=self.adam_m,
            adam_v=self.adam_v,
            step=self.step,
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            order=list(self.order),
            position=self.position,
            skipped_steps=self.skipped_steps,
        )

    @classmethod
    def from_checkpoint(cls, ckpt, corpus, out_dir=None):
        vocab = data.CharVocab(ckpt.vocab)
        t = cls(ckpt.config, corpus, vocab, with_guided=True, out_dir=out_dir, params=ckpt.params)
        t.adam_m = {k: a.copy() for k, a in ckpt.adam_m.items()}
        t.adam_v = {k: a.copy() for k, a in ckpt.adam_v.items()}
        t.rng.bit_generator.state = ckpt.rng_state
        t.step, t.epoch = ckpt.step, ckpt.epoch
        t.order, t.position = list(ckpt.order), ckpt.position
        t.skipped_steps = ckpt.skipped_steps
        return t

    # loop --------------------------------------------------------------------

    def next_batch(self):
        bs = self.cfg.batch_size
        if self.position >= len(self.order):
            if self.order:
                self.epoch += 1
            self.order = [int(i) for i in self.rng.permutation(len(self.corpus))]
            self.position = 0
        idx = self.order[self.position : self.position + bs]
        self.position += bs
        return data.make_batch([self.corpus[i] for i in idx], self.cfg.r, self.cfg.np_dtype)

    def train_step(self):
        batch = self.next_batch()
        cfg = self.cfg
        tf = teacher_forcing_ratio(self.epoch, cfg)
        self.params.zero_grad()
        with Tape() as tape:
            out = model.forward(batch, self.params, self.model_config, tf, self.rng)
            loss, parts = total_loss(out, batch, cfg.guided_weight, cfg.guided_g, cfg.stop_pos_weight)
        if not np.isfinite(float(loss.data)):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step + 1} on batch {batch.ids}: {parts}"
            )
        tape.backward(loss)
        names = list(self.params)
        grads = [
            self.params[k].grad if self.params[k].grad is not None else np.zeros_like(self.params[k].data)
            for k in names
        ]
        self.step += 1
        if all(np.all(np.isfinite(g)) for g in grads):
            clip_grad_norm(grads, cfg.grad_clip)
            t = self.step - self.skipped_steps
            adam_step(
                [self.params[k].data for k in names],
                grads,
                [self.adam_m[k] for k in names],
                [self.adam_v[k] for k in names],
                t,
                cfg.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
        else:
            self.skipped_steps += 1
            log.warning("step %d: non-finite gradient, update skipped (%d so far)", self.step, self.skipped_steps)
        A = out.alignments.data
        self.last_alignment = A[0, : batch.step_lengths[0], : batch.char_lengths[0]].T.copy()
        rec = dict(parts)
        rec["step"] = self.step
        rec["diag"] = attention.batch_diagonal_mass(A, batch.char_lengths, batch.step_lengths, cfg.diag_band)
        rec["tf"] = tf
        self.records.append(rec)
        return rec

    def save(self, path=None):
        path = Path(path) if path else self.out_dir / f"ckpt_{self.step:07d}.msqk"
        save_checkpoint(path, self.checkpoint())
        return path

    def run(self, steps, log_file=None, callback=None):
        """Train for ``steps`` more steps, appending log lines to ``log_file`` if given."""
        fh = open(log_file, "a", encoding="utf-8") if log_file else None
        try:
            for _ in range(steps):
                rec = self.train_step()
                if fh:
                    fh.write(format_log_line(rec) + "\n")
                if self.out_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save()
                    save_alignment(self.out_dir / f"alignment_{self.step:07d}.mspc", self.last_alignment)
                if callback is not None and callback(rec) is False:
                    break
        finally:
            if fh:
                fh.close()
        return self.records


def save_alignment(path, A):
    from melseq import audio

    audio.write_mspc(path, np.asarray(A, dtype=np.float32))


def default_total_steps(cfg, n_utts):
    if cfg.max_steps:
        return cfg.max_steps
    return cfg.epochs * math.ceil(n_utts / cfg.batch_size)


def train(cfg, corpus, with_guided=True, out_dir=None, steps=None, vocab=data.DEFAULT_VOCAB):
    """Run a full training job; returns the finished :class:`Trainer`.

    With ``out_dir`` set, writes ``train.log``, periodic checkpoints and
    alignment snapshots there, plus a final checkpoint.
    """
    trainer = Trainer(cfg, corpus, vocab, with_guided=with_guided, out_dir=out_dir)
    steps = steps if steps is not None else default_total_steps(trainer.cfg, len(corpus))
    log_file = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_file = Path(out_dir) / "train.log"
        (Path(out_dir) / "config.txt").write_text(trainer.cfg.to_text(), encoding="utf-8")
    trainer.run(steps, log_file)
    if out_dir:
        trainer.save(Path(out_dir) / "final.msqk")
        save_alignment(Path(out_dir) / "alignment_final.mspc", trainer.last_alignment)
    return trainer


def parameter_report(params):
    """Lines ``name  count`` for every tensor plus a total line."""
    rows = params.counts()
    width = max(len(n) for n, _ in rows)
    lines = [f"{name:<{width}}  {count:>10,d}" for name, count in rows]
    lines.append(f"{'total':<{width}}  {params.count():>10,d}")
    return "\n".join(lines)
