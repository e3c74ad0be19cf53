"""Continual learning as a service: stateful model updates over a stream of experiences."""

__version__ = "0.1.0"
