"""Learning ODEs through diffeomorphisms of simple base dynamics."""

__version__ = "0.1.0"
