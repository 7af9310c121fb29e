"""Relevant-motion clip classification engine.

Classifies fixed-length surveillance clips in a single forward pass of a
spatial-temporal attention 3D ConvNet, with weak labeling from object
detections and a synthetic benchmark harness.
"""

__version__ = "0.1.0"
