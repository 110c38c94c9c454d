"""accmon: desk-scale monitoring stack for residential collective self-consumption."""

__version__ = "0.1.0"
