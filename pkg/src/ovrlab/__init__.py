"""Own-voice reconstruction toolkit for two-microphone hearables.

Submodules cover the full pipeline: signal I/O and STFT (`signal_core`),
phoneme-specific transfer-function estimation (`rtf`), in-ear simulation and
noisy mixing (`augmentation`), two-channel Wiener filtering (`mwf`),
objective metrics (`metrics`), listening-test statistics (`analysis`), the
experiment HTTP service (`experiment`), and the command line (`cli`).
"""

from .augmentation import InEarSimulator, mix_at_snr, simulate_inear
from .errors import ToolkitError
from .metrics import estoi, estoi_improvement
from .mwf import MwfConfig, MwfEnhancer, enhance, enhance_waveform
from .rtf import PhonemeRtfEstimator, TransferModel, estimate_rtfs, load_model, save_model
from .signal_core import StftConfig, Waveform, istft, load_wav, resample, save_wav, stft

__version__ = "0.1.0"

__all__ = [
    "InEarSimulator",
    "MwfConfig",
    "MwfEnhancer",
    "PhonemeRtfEstimator",
    "StftConfig",
    "ToolkitError",
    "TransferModel",
    "Waveform",
    "enhance",
    "enhance_waveform",
    "estimate_rtfs",
    "estoi",
    "estoi_improvement",
    "istft",
    "load_model",
    "load_wav",
    "mix_at_snr",
    "resample",
    "save_model",
    "save_wav",
    "simulate_inear",
    "stft",
    "__version__",
]
