"""Online driver-maneuver anticipation from multi-view camera streams.

A recurrent vision-transformer encoder carries a small block of episodic
memory tokens between timesteps, predicts the upcoming maneuver from them
at every frame, and trains with a context-consistency penalty that
discourages probability mass on maneuvers implausible in the current
traffic context.
"""

from .kernel import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
