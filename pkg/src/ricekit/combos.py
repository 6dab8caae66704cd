"""The seven input-channel combinations used by the ablation experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

POST_OP = "post_op"
EVENT = "event"
DOSE = "dose"

CHANNEL_ORDER = (POST_OP, EVENT, DOSE)

# Canonical indexing: singles first (post_op, event, dose), then pairs, then all.
_COMBO_CHANNELS = {
    1: (POST_OP,),
    2: (EVENT,),
    3: (DOSE,),
    4: (POST_OP, EVENT),
    5: (POST_OP, DOSE),
    6: (EVENT, DOSE),
    7: (POST_OP, EVENT, DOSE),
}


@dataclass(frozen=True)
class ModalityCombo:
    """A non-empty subset of the three input channels, canonically indexed 1-7."""

    index: int

    def __post_init__(self):
        if self.index not in _COMBO_CHANNELS:
            raise ValueError(f"combo index must be 1..7, got {self.index}")

    @property
    def channels(self) -> tuple[str, ...]:
        return _COMBO_CHANNELS[self.index]

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def name(self) -> str:
        return "+".join(self.channels)

    @classmethod
    def from_channels(cls, channels: Iterable[str]) -> "ModalityCombo":
        wanted = tuple(c for c in CHANNEL_ORDER if c in set(channels))
        for idx, chans in _COMBO_CHANNELS.items():
            if chans == wanted:
                return cls(idx)
        raise ValueError(f"no combo matches channels {tuple(channels)}")

    def __str__(self) -> str:
        return f"({self.index}) {self.name}"


ALL_COMBOS = tuple(ModalityCombo(i) for i in sorted(_COMBO_CHANNELS))
