"""Desk-scale federated learning simulator for steganographic backdoor attacks."""

__version__ = "0.1.0"
