"""Occlusion-robust human motion capture.

A masked-modeling motion prior over 2D motion maps, a 3D lifting network
that shares its spatial-temporal encoder, a global translation solver, and
the surrounding data/evaluation tooling.
"""

__version__ = "0.1.0"
