"""Self-supervised audio representations from a cross-correlation redundancy-reduction objective."""

__version__ = "0.1.0"
