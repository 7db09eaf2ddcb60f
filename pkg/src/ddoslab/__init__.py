"""Federated GANomaly laboratory for multi-domain DDoS detection on NetFlow data."""

__version__ = "0.1.0"
