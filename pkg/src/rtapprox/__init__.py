"""Rooted-tree approximation for SIR/SEIR contagion on networks."""
