"""Desk-scale open-vocabulary object detection.

Two-stage pipeline: contrastive visual grounding on image-caption pairs,
then detector training on base-class boxes with a frozen vision-to-language
classification head that can be retargeted to any class names at test time.
Built on a small from-scratch reverse-mode autodiff tensor core.
"""

__version__ = "0.1.0"
