"""Test package marker for stable test imports."""
