"""Decentralised EV valley filling with state-obfuscated profiles."""

__version__ = "0.1.0"
