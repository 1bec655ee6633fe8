"""Numerical stability diagnostics for holomorphic families of endomorphisms of P^k."""

__version__ = "0.1.0"
