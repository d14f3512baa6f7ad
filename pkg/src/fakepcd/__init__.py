"""Open-world source attribution for point clouds from simulated generators."""

__version__ = "0.1.0"
