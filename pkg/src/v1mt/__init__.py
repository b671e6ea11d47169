"""Two-stage image-computable model of visual motion perception.

Stage I (:mod:`v1mt.stage1`) is a bank of 256 trainable spatiotemporal
motion-energy units over an eight-level image pyramid.  Stage II
(:mod:`v1mt.stage2`) integrates the energy map on a self-attention graph with
recurrent updates and decodes dense optical flow at every iteration.
"""
__version__ = "0.1.0"

from . import metrics, numgrid, stimuli  # noqa: F401
from .stage1 import EnergyBank, GaborUnit, stage1_forward  # noqa: F401
from .stage2 import CapacityError, Stage2  # noqa: F401
