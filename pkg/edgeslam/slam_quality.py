#!/usr/bin/env python3

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

logger = logging.getLogger(__name__)

"""
Initialization quality: straight 2D edge segments on the reference keyframe whose
tracked points reconstruct as an ordered, collinear run of 3D points.
"""

MIN_TRACKED_PER_SEGMENT = 3


@dataclass
class Segment2D:
    chain_id: int
    start: int  # first chain index, inclusive
    end: int    # last chain index, inclusive
    points: np.ndarray

    def __len__(self):
        return self.end - self.start + 1


@dataclass
class SegmentCheck:
    segment: Segment2D
    tracked: int
    reconstructed: int
    coverage: float
    line_rms: float
    ordered: bool
    matched: bool


@dataclass
class QualityReport:
    """
    segments_2d counts the segments carrying at least three tracked points; the ratio is
    taken over those. Segments with fewer are tallied in segments_untracked.
    """
    segments_2d: int
    segments_matched: int
    segments_untracked: int = 0
    checks: List[SegmentCheck] = field(default_factory=list, repr=False)

    @property
    def ratio(self):
        if self.segments_2d == 0:
            return 0.0
        return self.segments_matched / self.segments_2d

    def accepted(self, min_ratio=0.6, min_count=20):
        return self.ratio >= min_ratio and self.segments_matched >= min_count

    def as_dict(self):
        return {"segments_2d": self.segments_2d, "segments_matched": self.segments_matched,
                "segments_untracked": self.segments_untracked, "ratio": round(self.ratio, 6)}


def _max_deviation(points, start, end):
    direction = points[end] - points[start]
    length = np.hypot(direction[0], direction[1])
    offsets = points[start:end + 1] - points[start]
    if length == 0:
        return float(np.max(np.hypot(offsets[:, 0], offsets[:, 1])))
    return float(np.max(np.abs(offsets[:, 0] * direction[1] - offsets[:, 1] * direction[0])) / length)


def straight_segments(chain, max_dev=1.0, min_len=10):
    """
    Greedy split of a chain into straight runs: a run grows while every point stays
    within max_dev of the line joining its ends; runs shorter than min_len are dropped.
    """
    points = np.asarray(chain.points, dtype=np.float64)
    segments = []
    start = 0
    while start < len(points) - 1:
        end = start + 1
        while end + 1 < len(points) and _max_deviation(points, start, end + 1) <= max_dev:
            end += 1
        if end - start + 1 >= min_len:
            segments.append(Segment2D(chain.id, start, end, points[start:end + 1]))
        start = end
    return segments


def line_fit_rms(points):
    """RMS perpendicular distance to the total-least-squares 3D line."""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    residual = centered - np.outer(centered @ vt[0], vt[0])
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1)))), vt[0]


def check_segment(segment, chain_positions, positions_3d, median_depth, coverage=0.7, collinear_frac=0.02):
    """
    :param chain_positions: chain indices of the tracked points on this segment, ascending
    :param positions_3d: matching list of 3D positions, None where the point was not reconstructed
    """
    reconstructed = [(pos, point) for pos, point in zip(chain_positions, positions_3d) if point is not None]
    tracked = len(chain_positions)
    fraction = len(reconstructed) / tracked if tracked else 0.0
    line_rms, ordered = np.inf, False

    if len(reconstructed) >= 2:
        points = np.array([point for _, point in reconstructed])
        line_rms, direction = line_fit_rms(points)
        along = (points - points.mean(axis=0)) @ direction
        steps = np.diff(along)
        ordered = bool(np.all(steps > 0) or np.all(steps < 0))

    matched = (fraction >= coverage and len(reconstructed) >= MIN_TRACKED_PER_SEGMENT and ordered and
               line_rms <= collinear_frac * median_depth)
    return SegmentCheck(segment, tracked, len(reconstructed), fraction, line_rms, ordered, matched)


def quality_factor(segments, tracked_on_segment, positions_3d, median_depth, coverage=0.7, collinear_frac=0.02):
    """
    Fraction of 2D segments matched by a 3D segment.
    :param tracked_on_segment: per segment, list of (chain index, track id) in chain order
    :param positions_3d: track id -> reconstructed 3D point (missing when not reconstructed)
    Only segments carrying at least three tracked points enter the ratio.
    :rtype: QualityReport
    """
    checks = []
    untracked = 0
    for segment, tracked in zip(segments, tracked_on_segment):
        if len(tracked) < MIN_TRACKED_PER_SEGMENT:
            untracked += 1
            continue
        chain_positions = [pos for pos, _ in tracked]
        points = [positions_3d.get(track_id) for _, track_id in tracked]
        checks.append(check_segment(segment, chain_positions, points, median_depth, coverage, collinear_frac))
    matched = sum(1 for check in checks if check.matched)
    report = QualityReport(segments_2d=len(checks), segments_matched=matched, segments_untracked=untracked,
                           checks=checks)
    logger.info("Quality factor %.3f (%d of %d segments matched, %d without enough tracks)"
                % (report.ratio, matched, len(checks), untracked))
    return report


def tracks_on_segments(segments, tracks):
    """
    Group tracks spawned on the reference chains by the segment their chain index falls in.
    :param tracks: iterable of PointTrack spawned on the reference frame
    """
    by_chain: Dict[int, List] = {}
    for track in tracks:
        if track.chain_id is not None and track.chain_pos is not None:
            by_chain.setdefault(track.chain_id, []).append((track.chain_pos, track.track_id))
    grouped = []
    for segment in segments:
        members = [(pos, track_id) for pos, track_id in by_chain.get(segment.chain_id, [])
                   if segment.start <= pos <= segment.end]
        grouped.append(sorted(members))
    return grouped
