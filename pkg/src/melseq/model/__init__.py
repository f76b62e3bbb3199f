"""Sequence-to-sequence spectrogram model: encoder, query-key attention, decoder."""

from melseq.model.attention import (
    attend,
    compute_query,
    diagonal_mass,
    force_incremental,
    guided_attention_loss,
    guided_mask,
)
from melseq.model.config import ModelConfig, init_params
from melseq.model.decoder import DecoderState, decode_step, decode_teacher_forced, initial_state, prenet
from melseq.model.encoder import EncoderOutput, encode, encode_batch


def forward(batch, params, cfg, tf_ratio=1.0, rng=None):
    """Encode ``batch`` and decode it under teacher forcing."""
    enc = encode_batch(batch.char_ids, batch.char_lengths, params)
    return decode_teacher_forced(batch, enc, params, cfg, tf_ratio, rng)


__all__ = [
    "DecoderState",
    "EncoderOutput",
    "ModelConfig",
    "attend",
    "compute_query",
    "decode_step",
    "decode_teacher_forced",
    "diagonal_mass",
    "encode",
    "encode_batch",
    "force_incremental",
    "forward",
    "guided_attention_loss",
    "guided_mask",
    "init_params",
    "initial_state",
    "prenet",
]
