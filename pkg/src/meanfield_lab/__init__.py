"""Entropy-regularized mean-field optimum, Foellmer bridge dynamics and SGD tracking
for two-layer networks with bounded activations."""

__version__ = "0.1.0"
