"""Scene-coordinate regression with pixel-of-interest filtering of rendered training data."""
from .errors import PoiLocError
from .geometry import Intrinsics, Pose

__all__ = ["Intrinsics", "Pose", "PoiLocError"]
__version__ = "0.1.0"
