"""Crop-region, trim-window and frame-resampling arithmetic.

All functions are pure; coordinates are integer pixels, times are integer
frame indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scenario import BBox

PAD = -1


@dataclass(frozen=True)
class SquareRegion:
    """Crop rectangle.  ``square`` is False when the side exceeded the frame and was clipped."""

    x0: int
    y0: int
    side: int
    width: int
    height: int
    square: bool = True

    @classmethod
    def full_frame(cls, frame: tuple[int, int]) -> "SquareRegion":
        H, W = frame
        return cls(0, 0, max(H, W), W, H, square=H == W)

    @property
    def x1(self) -> int:
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        return self.y0 + self.height

    def contains(self, box: BBox) -> bool:
        return self.x0 <= box.x_st and box.x_ed <= self.x1 and self.y0 <= box.y_st and box.y_ed <= self.y1

    def key(self) -> str:
        return f"{self.x0},{self.y0},{self.width},{self.height}"


@dataclass(frozen=True)
class TrimWindow:
    start_n: int
    end_n: int

    @property
    def duration(self) -> int:
        return self.end_n - self.start_n


@dataclass(frozen=True)
class ResamplePlan:
    source_indices: tuple[int, ...]
    pad_mask: tuple[bool, ...]

    @property
    def F(self) -> int:
        return len(self.source_indices)

    @property
    def count(self) -> int:
        return sum(not p for p in self.pad_mask)


def _place_axis(lo: int, hi: int, side: int, limit: int) -> tuple[int, int, bool]:
    """Extend [lo, hi) symmetrically to ``side``, shift inside [0, limit), clip if too long."""
    if side > limit:
        return 0, limit, True
    start = lo - (side - (hi - lo)) // 2
    start = min(max(start, 0), limit - side)
    return start, side, False


def _square_around(x_lo, x_hi, y_lo, y_hi, frame) -> SquareRegion:
    H, W = frame
    if H <= 0 or W <= 0:
        raise ValueError(f"frame dims must be positive, got {frame}")
    side = max(x_hi - x_lo, y_hi - y_lo)
    x0, w, cx = _place_axis(x_lo, x_hi, side, W)
    y0, h, cy = _place_axis(y_lo, y_hi, side, H)
    return SquareRegion(x0, y0, side, w, h, square=not (cx or cy))


def union_crop_region(boxes: Sequence[BBox], frame: tuple[int, int]) -> SquareRegion:
    """Square region covering the union of ``boxes``.

    The side is the longer extent of the union; the shorter axis is extended
    symmetrically about the union center and the square is shifted inward at
    frame edges.  When the side exceeds a frame dimension that axis is clipped
    to the full frame and ``square`` is False.
    """
    if not boxes:
        raise ValueError("union_crop_region needs at least one box")
    x_lo = min(b.x_st for b in boxes)
    x_hi = max(b.x_ed for b in boxes)
    y_lo = min(b.y_st for b in boxes)
    y_hi = max(b.y_ed for b in boxes)
    return _square_around(x_lo, x_hi, y_lo, y_hi, frame)


def local_crop_region(box: BBox, frame: tuple[int, int]) -> SquareRegion:
    return _square_around(box.x_st, box.x_ed, box.y_st, box.y_ed, frame)


def trim_window(start_1: int, end_P: int, T: int, off_st: int, off_ed: int) -> TrimWindow:
    start_n = max(0, start_1 - off_st)
    end_n = min(end_P + off_ed, T)
    if end_n <= start_n:
        # zero-length event with zero offsets; keep D >= 1
        end_n = min(start_n + 1, T)
    return TrimWindow(start_n, end_n)


def sample_trim_window(
    boundaries: Sequence[tuple[int, int]],
    T: int,
    fps: float,
    rng: np.random.Generator,
    max_offset_s: float = 5.0,
) -> TrimWindow:
    """Draw start/end offsets uniformly in ``[0, max_offset_s * fps]`` frames and trim."""
    if not boundaries:
        raise ValueError("at least one phase required")
    start_1 = boundaries[0][0]
    end_P = boundaries[-1][1]
    if end_P >= T:
        raise ValueError(f"last phase end {end_P} must be < T={T}")
    hi = int(round(max_offset_s * fps))
    off_st = int(rng.integers(0, hi + 1))
    off_ed = int(rng.integers(0, hi + 1))
    return trim_window(start_1, end_P, T, off_st, off_ed)


def resample_to_F(window_len: int, src_fps: float = 30.0, mid_fps: float = 3.0, F: int = 100) -> ResamplePlan:
    """Pick ``F`` window-relative frame indices: stride to ``mid_fps``, then thin or pad.

    Thinning takes ``floor`` of an even linear spacing over the mid-rate frames;
    padding appends ``PAD`` entries at the tail.
    """
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    if F < 1:
        raise ValueError("F must be >= 1")
    stride = max(1, int(round(src_fps / mid_fps)))
    mid = list(range(0, window_len, stride))
    count = len(mid)
    if count > F:
        if F == 1:
            picks = [0]
        else:
            picks = [(k * (count - 1)) // (F - 1) for k in range(F)]
        chosen = []
        for p in picks:
            # strict-increase repair
            if chosen and p <= chosen[-1]:
                p = chosen[-1] + 1
            chosen.append(p)
        idx = [mid[p] for p in chosen]
    else:
        idx = mid
    pad = F - len(idx)
    return ResamplePlan(tuple(idx) + (PAD,) * pad, (False,) * len(idx) + (True,) * pad)
