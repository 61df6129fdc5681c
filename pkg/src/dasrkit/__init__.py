"""Array speech enhancement, augmentation and hypothesis fusion for distant ASR.

The enhancement chain lives in :mod:`dasrkit.pipeline`; the other modules
are usable on their own.
"""
from .audio import MultichannelWaveform, Spectrogram, StftConfig, Waveform, istft, read_wav, stft, write_wav
from .pipeline import PipelineConfig, enhance_manifest, enhance_segment

__all__ = [
    "MultichannelWaveform", "PipelineConfig", "Spectrogram", "StftConfig", "Waveform",
    "enhance_manifest", "enhance_segment", "istft", "read_wav", "stft", "write_wav",
]
__version__ = "0.1.0"
