"""Cross-sectional factor analysis for AMM-priced subnet tokens."""

__version__ = "0.1.0"
