"""Trans-dimensional generative modeling with jump diffusions."""
from .estimator import JumpDiffusionModel, check_states
from .schedule import ScheduleConfig
from .state import DeletionMask, InsertionEvent, TransState, apply_mask, delete, insert

__all__ = [
    "DeletionMask",
    "InsertionEvent",
    "JumpDiffusionModel",
    "ScheduleConfig",
    "TransState",
    "apply_mask",
    "check_states",
    "delete",
    "insert",
]
__version__ = "0.1.0"
