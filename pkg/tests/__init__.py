"""Unit test package for gradfair."""
