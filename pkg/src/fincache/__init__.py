"""Fair collaborative in-network caching via Nash bargaining."""

__version__ = "0.1.0"
