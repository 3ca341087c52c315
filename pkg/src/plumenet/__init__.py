"""plumenet: a desk-scale digital twin of a methane-sensing IoT network."""

__version__ = "0.1.0"
