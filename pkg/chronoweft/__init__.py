# chronoweft
# Zero-shot reconstruction of chaotic trajectories from sparse observations
# and reservoir prediction of their long-term climate.

from chronoweft.settings import TOOL_VERSION as __version__

__all__ = ["__version__"]
