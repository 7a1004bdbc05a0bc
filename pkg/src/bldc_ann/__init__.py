"""Simulated BLDC drive with ANN-based sensorless position and speed estimation."""

__version__ = "0.1.0"
