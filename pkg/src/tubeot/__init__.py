"""tubeot: masked video pretraining against Sinkhorn-balanced prototype assignments."""

__version__ = "0.1.0"

__all__ = ["__version__"]
