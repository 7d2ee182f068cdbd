"""Numerical verification toolkit for finite ontic models."""
