"""Differentially private diffusion fine-tuning with low-dimensional conv adapters.

Submodules are imported explicitly (``from dploda import tensor``); this file
stays import-light so the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"
