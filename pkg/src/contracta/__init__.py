"""Symbolic calculus for partial contractions of curvature invariants."""
