"""
ddibp - distance dependent Indian buffet process toolkit.
Prior simulation, linear-Gaussian inference and feature-sharing verification.
"""

__version__ = "1.0.0"
