"""gridswarm: distributed voltage control co-simulation for radial feeders."""
__version__ = "0.1.0"
