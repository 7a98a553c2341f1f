"""Spatial-semantic observation assembly.

Per-prompt segmentation confidences are collapsed into one channel by a
pixel-wise maximum, relative depth is min-max normalized per frame, and the
two are stacked channel-first as ``(mask, depth)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

DEGENERATE_DEPTH_RANGE = 1e-8
DEGENERATE_DEPTH_VALUE = 0.5


@dataclass
class SemanticMaskSet:
    """``masks`` is (n, H, W) with confidences in [0, 1]; one label per mask."""

    masks: np.ndarray
    labels: list[str] = field(default_factory=list)
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=np.float32)
        if m.ndim != 3:
            if m.size == 0 and self.height is not None:
                m = m.reshape(0, self.height, self.width)
            else:
                raise InvalidArgument(f"masks must be (n, H, W), got shape {m.shape}")
        if len(self.labels) != m.shape[0]:
            raise InvalidArgument(f"{len(self.labels)} labels for {m.shape[0]} masks")
        if m.size and (np.any(m < 0.0) or np.any(m > 1.0)):
            raise InvalidArgument("mask confidences must lie in [0, 1]")
        self.masks = m
        self.height, self.width = m.shape[1], m.shape[2]

    def __len__(self) -> int:
        return self.masks.shape[0]


def fuse_masks(maskset: SemanticMaskSet) -> np.ndarray:
    """Collapse a mask set to the per-pixel most confident value.

    An empty set yields an all-zero (H, W) mask.
    """
    if len(maskset) == 0:
        return np.zeros((maskset.height, maskset.width), dtype=np.float32)
    return maskset.masks.max(axis=0)


def normalize_depth(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise InvalidArgument(f"depth must be (H, W), got shape {raw.shape}")
    return normalize_depth_stack(raw)


def normalize_depth_stack(raw: np.ndarray) -> np.ndarray:
    """Per-frame min-max normalization over the last two axes of ``raw``."""
    raw = np.asarray(raw)
    if raw.ndim < 2:
        raise InvalidArgument(f"depth must be (..., H, W), got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise InvalidArgument("depth map contains non-finite values")
    r = raw.astype(np.float64)
    lo = r.min(axis=(-2, -1), keepdims=True)
    span = r.max(axis=(-2, -1), keepdims=True) - lo
    flat = span < DEGENERATE_DEPTH_RANGE
    out = (r - lo) / np.where(flat, 1.0, span)
    out = np.where(flat, DEGENERATE_DEPTH_VALUE, out)
    return out.astype(np.float32)


def build_observation(fused: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Stack a fused mask and a normalized depth map into a (2, H, W) tensor."""
    fused = np.asarray(fused, dtype=np.float32)
    depth = np.asarray(depth, dtype=np.float32)
    if fused.ndim != 2 or fused.shape != depth.shape:
        raise InvalidArgument(f"mask shape {fused.shape} does not match depth shape {depth.shape}")
    return np.stack([fused, depth])
