"""Two-stage coordination of EV charging stations on a radial feeder."""

__version__ = "0.1.0"
