"""Experiment orchestration: configuration, metrics, pipeline and CLI."""
