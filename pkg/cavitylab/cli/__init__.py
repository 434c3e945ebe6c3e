"""
CavityLab CLI Package

Command-line interface for running cavitylab experiments.
"""

from cavitylab.cli.main import app, main

__all__ = ["app", "main"]
