"""Dead-end discovery with distributional value estimates and CVaR."""
__version__ = "0.1.0"
