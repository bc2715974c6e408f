"""Top-level package for gradfair."""

__author__ = """Gradfair Developers"""
__email__ = "developers@gradfair.org"
__version__ = "0.1.0"
