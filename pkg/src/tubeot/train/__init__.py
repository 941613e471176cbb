"""Pretraining loop and checkpoint format."""
