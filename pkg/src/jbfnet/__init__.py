"""Trainable joint bilateral filtering for low-dose CT denoising.

A prior-estimating CNN feeds four 112-parameter joint-bilateral-filter
blocks with noise-map mixing; trained and evaluated end-to-end on synthetic
CT-like phantom volumes. See README.md for the CLI and file formats.
"""

__version__ = "0.1.0"
