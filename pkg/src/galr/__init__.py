"""Globally attentive locally recurrent (GALR) speech separation in numpy."""

from .blocks import DPRNN, GALR, BlockVariant
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import complexity_terms, flops_estimate, memory_estimate, mpl
from .errors import GALRError
from .estimator import GALRSeparator
from .frontend import Waveform, decode, encode, overlap_add, segment
from .separator import TOY, HyperParams, SeparatorModel, attention_dump, count_params, separate
from .training import gen_synthetic, pit_loss, si_snr, train
from .wav import wav_read, wav_write

__version__ = "0.1.0"

__all__ = [
    "BlockVariant", "DPRNN", "GALR", "GALRError", "GALRSeparator", "HyperParams", "SeparatorModel",
    "TOY", "Waveform", "attention_dump", "complexity_terms", "count_params", "decode", "encode",
    "flops_estimate", "gen_synthetic", "load_checkpoint", "memory_estimate", "mpl", "overlap_add",
    "pit_loss", "save_checkpoint", "segment", "separate", "si_snr", "train", "wav_read", "wav_write",
]
