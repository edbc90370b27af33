"""Multi-exaggeration caricature generation.

``geometry`` holds the landmark/deformation-field core, ``warper`` and
``styler`` the two networks, ``trainer`` the training loops, ``evaluation``
the metrics and ``cli`` the command-line tool.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
