"""Benchmark engine for data-driven weather and climate tasks."""

__version__ = "0.1.0"
