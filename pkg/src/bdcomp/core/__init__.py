"""Numerical engine: densities, models, inversion, group analysis and comparison."""
