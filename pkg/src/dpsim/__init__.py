"""Discrete-event simulator for structured peer-to-peer overlays."""

__version__ = "0.1.0"
