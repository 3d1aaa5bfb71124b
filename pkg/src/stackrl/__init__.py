"""Goal-conditioned graph-network agents for multi-object block manipulation."""

__version__ = "0.1.0"
