"""Frozen-feature evaluations."""
