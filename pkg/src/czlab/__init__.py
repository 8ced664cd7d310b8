"""Local T1 testbed on atomic upper-doubling measures with random dyadic grids."""

__version__ = "0.1.0"
