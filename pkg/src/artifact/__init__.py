"""Free energies, phase diagrams and exact partition functions of the
two-dimensional renewal pinning model (generalized Poland-Scheraga)."""

__version__ = "0.1.0"
