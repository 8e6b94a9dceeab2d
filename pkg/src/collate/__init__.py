"""Collaborative anomaly scoring: task-specific detector + LLM scorer fusion."""

__version__ = "0.1.0"
