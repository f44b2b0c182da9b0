"""Numerical normal forms and KAM torus construction for forced Duffing networks."""

__version__ = "0.1.0"
