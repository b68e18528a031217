"""Safe reinforcement-learning left turns among pedestrians on a 2D intersection."""

__version__ = "1.0.0"
