"""
Hyper-VolTran - feed-forward SDF reconstruction from a set of posed views.
"""

__version__ = "0.1.0"

from .config import RunConfig  # noqa: E402
from .model import HyperVolTranModel  # noqa: E402
from .train import Trainer  # noqa: E402

__all__ = ["HyperVolTranModel", "RunConfig", "Trainer"]
