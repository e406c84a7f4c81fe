"""Conservative treatment-plan optimization with signature-kernel path models."""

__version__ = "0.1.0"
