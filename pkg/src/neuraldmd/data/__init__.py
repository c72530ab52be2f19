"""Bundled station tables."""
