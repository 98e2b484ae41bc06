"""Cross-domain detection with separate category and box adaptors.

Subpackages are imported on demand; ``dadapt.kernels`` reports whether the
compiled or the pure-Python backend is active.
"""

__version__ = "0.1.0"
