"""
textkd-slu - Two-stage textual knowledge distillation for spoken language understanding.

Trains a discrete-token speech encoder and a convolutional-recurrent acoustic
model for intent classification, distilling knowledge from a character-level
text teacher during encoder pre-training and during fine-tuning.
"""

from kdslu.version import __version__

__all__ = ["__version__"]
