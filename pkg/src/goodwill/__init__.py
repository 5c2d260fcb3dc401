"""Stochastic maximum principle toolkit for the delayed goodwill model."""
