from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field


class AugmentConfigError(Exception):
    """Raised when an augmentation cannot be carried out with the given configuration

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="invalid augmentation configuration"):
        self.msg = msg
        super().__init__(self.msg)


class AdditivePlan(BaseModel):
    noise_index: int = Field(ge=0)
    # reduced modulo the chosen clip's length when applied
    noise_offset: int = Field(ge=0)
    snr_db: float


class PitchPlan(BaseModel):
    shift_cents: float


class ReverbPlan(BaseModel):
    room_scale: float = Field(ge=0.0, le=100.0)
    rir_seed: int = Field(ge=0)


class AugmentationPlan(BaseModel):
    additive: Optional[AdditivePlan] = None
    pitch: Optional[PitchPlan] = None
    reverb: Optional[ReverbPlan] = None

    def methods(self):
        return [m for m in ("additive", "pitch", "reverb") if getattr(self, m) is not None]


@dataclass
class RoomImpulseResponse:
    taps: np.ndarray
    sample_rate: int

    def __len__(self):
        return self.taps.shape[0]
