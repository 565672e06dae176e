"""Desk-scale toolkit for detecting respiratory insufficiency from speech
with interpretable CNNs: synthetic corpus, dynamic preprocessing, a numpy
CNN with Grad-CAM, and heat-map masked resynthesis."""

__version__ = "0.1.0"
