"""Independently controllable factors: a numpy-only reproduction.

Subpackages are imported lazily by callers; this module only exposes the
version string.
"""

__version__ = "0.1.0"
