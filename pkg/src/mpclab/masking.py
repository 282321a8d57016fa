"""Dynamic chunk masking of input frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureSequence


@dataclass
class MaskPlan:
    chunk_size: int
    masked_chunks: frozenset[int]
    frame_mask: np.ndarray

    @property
    def num_masked_frames(self) -> int:
        return int(self.frame_mask.sum())


def plan_masks(T: int, valid: int, rng: np.random.Generator, chunk_size: int = 4,
               p: float = 0.15) -> MaskPlan:
    """Mask each chunk touching the valid region independently with probability p.

    Call once per feed; a fresh draw every time is what makes the masking dynamic.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must lie in [0, 1], got {p}")
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    if not 0 <= valid <= T:
        raise ConfigError(f"valid frame count {valid} outside [0, {T}]")
    n_chunks = -(-valid // chunk_size)
    hit = rng.random(n_chunks) < p
    masked = frozenset(int(i) for i in np.flatnonzero(hit))
    frame_mask = np.zeros(T, dtype=bool)
    frame_mask[:valid] = np.repeat(hit, chunk_size)[:valid]
    return MaskPlan(chunk_size, masked, frame_mask)


def apply_mask(seq: FeatureSequence, plan: MaskPlan) -> FeatureSequence:
    """Zero the masked frames; the caller keeps ``seq`` as reconstruction target."""
    if plan.frame_mask.shape[0] != seq.num_frames:
        raise DataError(f"mask covers {plan.frame_mask.shape[0]} frames, sequence has {seq.num_frames}")
    frames = seq.frames.copy()
    frames[plan.frame_mask] = 0.0
    return FeatureSequence(frames, seq.utterance_id, seq.sample_rate_tag)
