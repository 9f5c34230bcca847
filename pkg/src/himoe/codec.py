"""Unified 24-dim state/action vectors shared by every embodiment.

Slot layout (constant system-wide)::

    [0, 8)    end-effector block: [dpose(6), gripper, reserved]; planar
              embodiments use [dx, dy, gripper] in the first three dims
    [8, 16)   right-arm joints (single arms always land here), gripper last
    [16, 24)  left-arm joints, gripper last

States carry a validity mask (true on mapped slots). Actions are never
masked; unmapped slots are zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

UNIFIED_DIM = 24
EEF_SLOTS = range(0, 8)
RIGHT_SLOTS = range(8, 16)
LEFT_SLOTS = range(16, 24)
STD_EPS = 1e-6


class ActionSpace(str, enum.Enum):
    EEF = "EEF"
    JOINT = "Joint"


class Kind(str, enum.Enum):
    STATE = "State"
    ACTION = "Action"


@dataclass(frozen=True)
class Embodiment:
    """Static description of one robot body and how it maps into unified slots."""

    id: str
    action_space: ActionSpace
    arm_count: int
    raw_action_dim: int
    raw_state_dim: int
    control_hz: float
    action_slots: tuple
    state_slots: tuple
    n_streams: int = 1
    link_lengths: tuple = (0.55, 0.45)
    subsample: int = 1
    task: str = "reach"

    def __post_init__(self):
        object.__setattr__(self, "action_space", ActionSpace(self.action_space))
        for slots, dim, what in ((self.action_slots, self.raw_action_dim, "action"),
                                 (self.state_slots, self.raw_state_dim, "state")):
            if len(slots) != dim:
                raise ValueError(f"{self.id}: {what} slot map has {len(slots)} entries, raw dim {dim}")
            if len(set(slots)) != len(slots):
                raise ValueError(f"{self.id}: {what} slot map is not injective")
            if any(not 0 <= s < UNIFIED_DIM for s in slots):
                raise ValueError(f"{self.id}: {what} slot out of range")
            allowed = set(EEF_SLOTS) if self.action_space is ActionSpace.EEF else (
                set(RIGHT_SLOTS) if self.arm_count == 1 else set(RIGHT_SLOTS) | set(LEFT_SLOTS))
            if not set(slots) <= allowed:
                raise ValueError(f"{self.id}: {what} slots {slots} outside the {self.action_space.value} block")
        if self.arm_count not in (1, 2):
            raise ValueError("arm_count must be 1 or 2")

    def slots(self, kind: Kind) -> tuple:
        return self.action_slots if Kind(kind) is Kind.ACTION else self.state_slots

    def mapped_mask(self, kind: Kind) -> np.ndarray:
        m = np.zeros(UNIFIED_DIM, dtype=bool)
        m[list(self.slots(kind))] = True
        return m

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["action_space"] = self.action_space.value
        for k in ("action_slots", "state_slots", "link_lengths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Embodiment":
        d = dict(d)
        for k in ("action_slots", "state_slots", "link_lengths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class UnifiedVector:
    values: np.ndarray
    kind: Kind
    mask: np.ndarray | None = None

    def state_features(self) -> np.ndarray:
        """values ⊕ mask (width 48) as fed to the state projection."""
        if self.mask is None:
            raise ValueError("only states carry a mask")
        return np.concatenate([self.values, self.mask.astype(self.values.dtype)])


def encode(raw, emb: Embodiment, kind: Kind | str) -> UnifiedVector:
    kind = Kind(kind)
    raw = np.asarray(raw, dtype=np.float64)
    slots = emb.slots(kind)
    if raw.shape[-1] != len(slots):
        raise ValueError(f"{emb.id}: raw {kind.value.lower()} has length {raw.shape[-1]}, expected {len(slots)}")
    values = np.zeros(raw.shape[:-1] + (UNIFIED_DIM,))
    values[..., list(slots)] = raw
    mask = None
    if kind is Kind.STATE:
        mask = np.broadcast_to(emb.mapped_mask(kind), values.shape).copy()
    return UnifiedVector(values, kind, mask)


def decode(uv: UnifiedVector | np.ndarray, emb: Embodiment) -> np.ndarray:
    """Read an action back out of its mapped slots; other slots are ignored."""
    if isinstance(uv, UnifiedVector):
        if uv.kind is not Kind.ACTION:
            raise ValueError("decode expects an Action vector")
        values = uv.values
    else:
        values = np.asarray(uv)
    return values[..., list(emb.action_slots)].copy()


@dataclass(frozen=True)
class NormStats:
    """Per-dim affine normalizer for one dataset; identity on unmapped dims."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(UNIFIED_DIM))
    std: np.ndarray = field(default_factory=lambda: np.ones(UNIFIED_DIM))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(values: np.ndarray, mapped: np.ndarray) -> NormStats:
    """Fit mean / population std over ``values`` [n, 24] on ``mapped`` dims.

    Dims with std < 1e-6 get std = 1 so constant channels map to 0.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1, UNIFIED_DIM)
    if values.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    mapped = np.asarray(mapped, dtype=bool)
    mean = np.where(mapped, values.mean(axis=0), 0.0)
    std = np.where(mapped, values.std(axis=0), 1.0)
    std = np.where(std < STD_EPS, 1.0, std)
    return NormStats(mean, std)


def normalize_state(uv: UnifiedVector, stats: NormStats) -> UnifiedVector:
    """Normalize a state; masked-out entries stay exactly 0."""
    vals = np.where(uv.mask, stats.apply(uv.values), 0.0)
    return UnifiedVector(vals, Kind.STATE, uv.mask.copy())

