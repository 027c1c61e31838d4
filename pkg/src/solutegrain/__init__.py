"""Coupled random-walk solute / lattice-Boltzmann / Metaball DEM engine."""

__version__ = "0.1.0"
