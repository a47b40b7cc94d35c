"""Joint calibration and simulation of an equity index and its parsimonious SSVI surface."""

__version__ = "0.1.0"
