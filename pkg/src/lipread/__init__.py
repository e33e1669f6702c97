"""Low-resource lip reading on synthetic multilingual data.

The pipeline: quantize synthetic audio into discrete speech units, pretrain a
visual encoder with masked unit prediction on a high-resource toy language,
pretrain a memory-augmented decoder on audio-text pairs of the target
language, then join the two with an attention bridge and finetune on a small
video-text set.
"""

__version__ = "0.1.0"
