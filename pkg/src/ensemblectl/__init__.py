"""Pseudospectral optimal control of parameter-dispersed ensembles, with Bloch pulse studies."""

__version__ = "0.1.0"
