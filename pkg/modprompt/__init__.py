"""
Modular prompt learning for a toy CLIP on a numpy autograd.
"""
__version__ = '0.1.0'

from .configuration import Config  # noqa: E402
