"""Open-world encrypted traffic classification on raw packet payloads."""

__version__ = "0.1.0"
