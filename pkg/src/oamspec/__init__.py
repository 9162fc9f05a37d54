"""Trainable simulator of a hybrid optoelectronic OAM-spectrum processor."""

__version__ = "0.1.0"
