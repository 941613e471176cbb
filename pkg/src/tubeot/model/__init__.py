"""Tube tokenization, the video model, the projection network and prototypes."""
