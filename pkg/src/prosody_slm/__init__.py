"""Prosody-aware speech-language modelling at desk scale.

Synthetic speech, a toy ASR encoder with mel reconstruction, prosody
injection into a toy LM backbone, distillation, probing and evaluation.
"""

__version__ = "0.1.0"
