"""Synthetic clips and their on-disk stores."""
