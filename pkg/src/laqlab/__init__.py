"""Desk-scale lookahead layer-wise QAT laboratory.

Importing the package switches torch to 64-bit default floats; every module
assumes it.
"""
import torch

torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"
