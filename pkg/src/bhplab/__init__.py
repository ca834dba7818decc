"""Numerical potential theory on rectilinear slit domains."""
