"""Descriptive speech-text alignment at desk scale."""
