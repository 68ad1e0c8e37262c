"""Eigenvector method for umbrella sampling: stratified MCMC estimation."""
__version__ = "1.0.0"
