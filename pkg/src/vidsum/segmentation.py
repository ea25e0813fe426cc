"""Shot boundary detection by kernel change-point segmentation.

Frame descriptors are L2-normalized, a linear-kernel Gram matrix is formed,
and dynamic programming places boundaries that minimize total within-segment
scatter. The segment count m is chosen by penalizing the DP objective with
penalty * m * (log(T / m) + 1), capped at max_shots. Everything is exact
arithmetic over float64, so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix


class SegmentationError(ValueError):
    """Shot ranges are inconsistent (overlap, gap, or out of bounds)."""


@dataclass
class ShotList:
    """Half-open [start, end) frame ranges tiling [0, n_frames)."""

    boundaries: list = field(default_factory=list)  # list[(start, end)]
    source: str = "provided"  # "provided" | "detected"

    def __post_init__(self):
        self.boundaries = [(int(s), int(e)) for s, e in self.boundaries]

    def __len__(self):
        return len(self.boundaries)

    def __iter__(self):
        return iter(self.boundaries)

    def __getitem__(self, i):
        return self.boundaries[i]

    @property
    def n_frames(self):
        return self.boundaries[-1][1] if self.boundaries else 0

    def lengths(self):
        return np.array([e - s for s, e in self.boundaries], dtype=np.int64)

    def validate(self, n_frames=None):
        if not self.boundaries:
            raise SegmentationError("empty shot list")
        prev_end = 0
        for s, e in self.boundaries:
            if s != prev_end:
                raise SegmentationError(
                    f"shots must tile contiguously: expected start {prev_end}, got {s}"
                )
            if e <= s:
                raise SegmentationError(f"empty or reversed shot [{s}, {e})")
            prev_end = e
        if self.boundaries[0][0] != 0:
            raise SegmentationError("first shot must start at frame 0")
        if n_frames is not None and prev_end != n_frames:
            raise SegmentationError(
                f"shots cover [0, {prev_end}) but the video has {n_frames} frames"
            )
        return self

    def frame_shot_index(self):
        """Map each frame to the index of its shot."""
        idx = np.empty(self.n_frames, dtype=np.int64)
        for i, (s, e) in enumerate(self.boundaries):
            idx[s:e] = i
        return idx


def _as_array(features):
    if isinstance(features, Matrix):
        return features.data
    return np.asarray(features)


def _gram(features):
    x = _as_array(features).astype(np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0  # leave zero rows alone
    x = x / norms
    return x @ x.T


def segment_cost_table(gram):
    """cost[a, b] = within-segment scatter of frames [a, b), half-open.

    Scatter of a segment is sum of diagonal kernel entries minus the block
    sum divided by the segment length. Computed from 2-D prefix sums.
    """
    t = gram.shape[0]
    diag_cs = np.concatenate([[0.0], np.cumsum(np.diag(gram))])
    block = np.zeros((t + 1, t + 1))
    block[1:, 1:] = gram.cumsum(axis=0).cumsum(axis=1)
    cost = np.full((t + 1, t + 1), np.inf)
    for b in range(1, t + 1):
        a = np.arange(b)
        lengths = (b - a).astype(np.float64)
        blk = block[b, b] - block[a, b] - block[b, a] + block[a, a]
        cost[a, b] = (diag_cs[b] - diag_cs[a]) - blk / lengths
    return cost


def segmentation_penalty(n_frames, n_segments, penalty=1.0):
    return penalty * n_segments * (math.log(n_frames / n_segments) + 1.0)


def kts_segment(features, max_shots, penalty=1.0) -> ShotList:
    """Detect shot boundaries in a T x D feature matrix.

    Returns the segmentation minimizing
        total within-segment scatter + penalty * m * (log(T/m) + 1)
    over segment counts m = 1 .. min(max_shots, T). Ties go to the smaller
    segment count / earliest boundaries.
    """
    x = _as_array(features)
    t = x.shape[0]
    if t == 0:
        raise SegmentationError("cannot segment an empty video")
    if max_shots < 1:
        raise SegmentationError(f"max_shots must be >= 1, got {max_shots}")
    kmax = min(int(max_shots), t)

    cost = segment_cost_table(_gram(x))

    # dp[m][b] = best scatter splitting frames [0, b) into m segments
    dp = np.full((kmax + 1, t + 1), np.inf)
    back = np.zeros((kmax + 1, t + 1), dtype=np.int64)
    dp[0, 0] = 0.0
    for m in range(1, kmax + 1):
        for b in range(m, t + 1):
            prev = dp[m - 1, m - 1:b] + cost[m - 1:b, b]
            j = int(np.argmin(prev))  # earliest split on ties
            dp[m, b] = prev[j]
            back[m, b] = j + m - 1

    best_m, best_obj = 1, math.inf
    for m in range(1, kmax + 1):
        obj = dp[m, t] + segmentation_penalty(t, m, penalty)
        if obj < best_obj:
            best_m, best_obj = m, obj

    cuts = [t]
    b = t
    for m in range(best_m, 0, -1):
        b = int(back[m, b])
        cuts.append(b)
    cuts.reverse()
    bounds = [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]
    return ShotList(bounds, source="detected").validate(t)


def segmentation_objective(features, boundaries, penalty=1.0):
    """Scatter-plus-penalty objective of an explicit segmentation."""
    x = _as_array(features)
    cost = segment_cost_table(_gram(x))
    total = 0.0
    for s, e in boundaries:
        total = total + cost[s, e]
    return total + segmentation_penalty(x.shape[0], len(boundaries), penalty)


def resolve_shots(video, max_shots=None, penalty=1.0) -> ShotList:
    """Use the video's provided shots if any, otherwise run detection.

    ``video`` only needs ``.shots`` and ``.features`` attributes. The default
    shot cap scales with length (about one shot per eight frames).
    """
    shots = getattr(video, "shots", None)
    if shots is not None:
        if not isinstance(shots, ShotList):
            shots = ShotList(list(shots), source="provided")
        return shots.validate(_as_array(video.features).shape[0])
    t = _as_array(video.features).shape[0]
    if max_shots is None:
        max_shots = max(1, t // 8)
    return kts_segment(video.features, max_shots=max_shots, penalty=penalty)
