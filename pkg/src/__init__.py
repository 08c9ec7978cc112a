"""CXR Triage - two-stage chest X-ray screening engine."""

__version__ = "0.1.0"
