"""Ensemble eddy-viscosity simulator for shear-driven flow and Hardy-inequality checks."""

__version__ = "0.1.0"
