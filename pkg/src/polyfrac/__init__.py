"""Finite-element simulator for ductile transgranular fracture in
polycrystals: gradient-enhanced crystal plasticity coupled to phase-field
damage with damage-dependent grain-boundary conditions."""

__version__ = "0.1.0"
