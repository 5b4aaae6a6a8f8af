"""Versioned experiment presets (JSON)."""
