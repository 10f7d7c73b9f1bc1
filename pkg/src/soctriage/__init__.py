"""Alert triage: normalization, reasoning compression, routing and experts."""

__version__ = "0.1.0"
