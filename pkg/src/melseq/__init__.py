"""Seq2seq text-to-speech with query-key attention and a guided attention loss.

Subpackages: ``autodiff`` (tape-based gradients), ``model`` (encoder,
attention, decoder). Modules: ``audio`` (STFT, mel, Griffin-Lim, file
formats), ``data`` (text and corpus pipeline), ``training``, ``synthesis``,
``evaluation`` and ``estimator`` (scikit-learn style wrappers).
"""

from melseq.errors import MelseqError

__version__ = "0.1.0"

__all__ = ["MelseqError", "__version__"]
