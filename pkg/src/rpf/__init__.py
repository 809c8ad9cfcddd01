"""Poisson factorization with self-exciting user-item event processes for time-aware recommendation."""
