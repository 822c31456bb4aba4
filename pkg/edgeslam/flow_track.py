#!/usr/bin/env python3

import logging
from collections import deque
from contextlib import nullcontext
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import cv2
import numpy as np

from edgeslam.edge_detect import blur_verdict, detect_edges

logger = logging.getLogger(__name__)

"""
Edge-point tracking between consecutive frames. Each stage only removes points:
    pyramidal LK -> bidirectional check -> redundancy removal -> snap to edges
and, when a track reaches three keyframes, the three-view epiline check.
"""

MIN_EIGEN_THRESHOLD = 1e-4
PARALLEL_SINE = 1e-3


class TrackStatus(Enum):
    LIVE = "live"
    DEAD = "dead"


@dataclass
class PointTrack:
    track_id: int
    positions: Dict[int, np.ndarray] = field(default_factory=dict)  # tracker step -> (x, y)
    status: TrackStatus = TrackStatus.LIVE
    birth_keyframe: Optional[int] = None
    chain_id: Optional[int] = None
    chain_pos: Optional[int] = None
    rejected_at: Optional[int] = None

    @property
    def is_live(self):
        return self.status is TrackStatus.LIVE

    @property
    def birth_frame(self):
        return min(self.positions) if self.positions else None

    @property
    def last_frame(self):
        return max(self.positions) if self.positions else None

    def add(self, frame_index, position):
        if not self.is_live:
            raise ValueError("Track %d is dead" % self.track_id)
        last = self.last_frame
        if last is not None and frame_index != last + 1:
            raise ValueError("Track %d jumps from frame %d to %d" % (self.track_id, last, frame_index))
        self.positions[frame_index] = np.asarray(position, dtype=np.float64).reshape(2)

    def kill(self):
        self.status = TrackStatus.DEAD

    def reject(self, frame_index):
        """Kill the track and disown its positions from frame_index on."""
        self.rejected_at = frame_index
        self.kill()

    def position(self, frame_index):
        if self.rejected_at is not None and frame_index >= self.rejected_at:
            return None
        return self.positions.get(frame_index)


@dataclass(frozen=True)
class FlowParams:
    window: int = 21
    pyramid_levels: int = 3
    max_iters: int = 30
    eps: float = 0.01
    bidir_tol: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("Flow window must be odd and at least 3, got %d" % self.window)
        if self.pyramid_levels < 1:
            raise ValueError("Need at least one pyramid level, got %d" % self.pyramid_levels)

    @classmethod
    def from_config(cls, config):
        return cls(window=config["flow.window"], pyramid_levels=config["flow.levels"],
                   max_iters=config["flow.max_iters"], eps=config["flow.eps"],
                   bidir_tol=config["flow.bidir_tol"])


@dataclass
class FlowResult:
    points: np.ndarray
    converged: np.ndarray


@dataclass
class AdvanceStats:
    tracked: int = 0
    after_flow: int = 0
    after_bidirectional: int = 0
    after_dedup: int = 0
    after_snap: int = 0
    mean_displacement: float = 0.0


def _pixels(frame):
    return getattr(frame, "pixels", frame)


def _inside(points, width, height, margin):
    return ((points[:, 0] >= margin) & (points[:, 0] <= width - 1 - margin) &
            (points[:, 1] >= margin) & (points[:, 1] <= height - 1 - margin))


def pyramidal_lk(prev_frame, next_frame, points, params=None):
    """
    Sparse iterative pyramidal Lucas-Kanade.
    :return: FlowResult with new positions and a converged flag per point
    """
    params = params or FlowParams()
    prev_pixels = _pixels(prev_frame)
    next_pixels = _pixels(next_frame)
    if prev_pixels.shape != next_pixels.shape:
        raise ValueError("Frames differ in size: %s vs %s" % (prev_pixels.shape, next_pixels.shape))

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return FlowResult(np.zeros((0, 2)), np.zeros(0, dtype=bool))

    height, width = prev_pixels.shape
    margin = params.window // 2
    usable = _inside(points, width, height, margin) & np.all(np.isfinite(points), axis=1)

    new_points = points.copy()
    converged = np.zeros(len(points), dtype=bool)
    if np.any(usable):
        criteria = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, params.max_iters, params.eps)
        tracked, status, _ = cv2.calcOpticalFlowPyrLK(
            prev_pixels, next_pixels, points[usable].astype(np.float32).reshape(-1, 1, 2), None,
            winSize=(params.window, params.window), maxLevel=params.pyramid_levels - 1,
            criteria=criteria, flags=0, minEigThreshold=MIN_EIGEN_THRESHOLD)
        tracked = tracked.reshape(-1, 2).astype(np.float64)
        new_points[usable] = tracked
        converged[usable] = status.ravel().astype(bool) & _inside(tracked, width, height, 0)
    return FlowResult(new_points, converged)


def bidirectional_filter(original, forward, backward, tol=1.0):
    """Indices whose forward-backward round trip lands within tol of the original position."""
    original = np.asarray(original, dtype=np.float64).reshape(-1, 2)
    error = np.linalg.norm(backward.points - original, axis=1)
    keep = forward.converged & backward.converged & (error <= tol)
    return np.nonzero(keep)[0]


class _GridIndex:
    """Points hashed into square cells of side min_dist for neighbour queries."""

    def __init__(self, cell):
        self.cell = max(float(cell), 1e-9)
        self.cells = {}

    def _key(self, point):
        return int(np.floor(point[0] / self.cell)), int(np.floor(point[1] / self.cell))

    def add(self, point):
        self.cells.setdefault(self._key(point), []).append(np.asarray(point, dtype=np.float64))

    def has_neighbour(self, point, radius):
        cx, cy = self._key(point)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for other in self.cells.get((cx + dx, cy + dy), ()):
                    if np.hypot(other[0] - point[0], other[1] - point[1]) < radius:
                        return True
        return False


def dedup_points(points, min_dist=2.0, order=None):
    """
    Greedy redundancy removal. Points are scanned in the given order (oldest track first);
    a point survives if no earlier survivor lies closer than min_dist.
    :return: sorted indices of survivors
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if order is None:
        order = np.arange(len(points))
    grid = _GridIndex(min_dist)
    kept = []
    for index in order:
        if grid.has_neighbour(points[index], min_dist):
            continue
        grid.add(points[index])
        kept.append(index)
    return np.array(sorted(kept), dtype=np.int64)


def snap_filter(points, mask, radius=2):
    """Indices of points with an edge pixel within Chebyshev distance radius."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mask = np.asarray(mask, dtype=bool)
    if len(points) == 0 or not mask.any():
        return np.zeros(0, dtype=np.int64)

    height, width = mask.shape
    integral = cv2.integral(mask.astype(np.uint8))
    finite = np.all(np.isfinite(points), axis=1)
    safe = np.where(finite[:, None], points, -1e9)

    x0 = np.clip(np.ceil(safe[:, 0] - radius), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(safe[:, 0] + radius) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(safe[:, 1] - radius), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(safe[:, 1] + radius) + 1, 0, height).astype(np.int64)
    count = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    keep = finite & (x1 > x0) & (y1 > y0) & (count > 0)
    return np.nonzero(keep)[0]


def fundamental_rank(fundamental, tol=1e-9):
    singular = np.linalg.svd(np.asarray(fundamental, dtype=np.float64), compute_uv=False)
    if singular[0] == 0:
        return 0
    return int(np.count_nonzero(singular > tol * singular[0]))


def _epilines(fundamental, points):
    homogeneous = np.column_stack([points, np.ones(len(points))])
    lines = homogeneous @ np.asarray(fundamental, dtype=np.float64).T
    norms = np.hypot(lines[:, 0], lines[:, 1])
    valid = norms > 1e-12
    lines[valid] /= norms[valid, None]
    return lines, valid


def three_view_filter(pos_a, pos_b, pos_c, f_ab, f_cb, tol=1.0, intersection_tol=None):
    """
    Keep a track iff its middle-view point lies within tol of both epilines induced by the
    outer views and within intersection_tol of their intersection. Near-parallel epiline
    pairs skip the intersection test only.
    :return: keep mask
    """
    pos_a = np.asarray(pos_a, dtype=np.float64).reshape(-1, 2)
    pos_b = np.asarray(pos_b, dtype=np.float64).reshape(-1, 2)
    pos_c = np.asarray(pos_c, dtype=np.float64).reshape(-1, 2)
    if intersection_tol is None:
        intersection_tol = 2.0 * tol

    if fundamental_rank(f_ab) != 2 or fundamental_rank(f_cb) != 2:
        logger.warning("Skipping three-view filter: fundamental matrix is not rank 2")
        return np.ones(len(pos_b), dtype=bool)

    line_1, valid_1 = _epilines(f_ab, pos_a)
    line_2, valid_2 = _epilines(f_cb, pos_c)
    homogeneous_b = np.column_stack([pos_b, np.ones(len(pos_b))])
    distance_1 = np.abs(np.sum(line_1 * homogeneous_b, axis=1))
    distance_2 = np.abs(np.sum(line_2 * homogeneous_b, axis=1))
    keep = valid_1 & valid_2 & (distance_1 <= tol) & (distance_2 <= tol)

    crossing = np.cross(line_1, line_2)
    sine = np.abs(crossing[:, 2])
    testable = keep & (sine >= PARALLEL_SINE)
    intersection = crossing[testable, :2] / crossing[testable, 2:3]
    near = np.linalg.norm(intersection - pos_b[testable], axis=1) <= intersection_tol
    keep[np.nonzero(testable)[0][~near]] = False
    return keep


class TrackTable:
    """All tracks ever spawned, keyed by id; ids grow with age."""

    def __init__(self):
        self.tracks: Dict[int, PointTrack] = {}
        self._next_id = 0

    def __len__(self):
        return len(self.tracks)

    def __getitem__(self, track_id):
        return self.tracks[track_id]

    def spawn(self, frame_index, position, keyframe_id=None, chain_id=None, chain_pos=None):
        track = PointTrack(track_id=self._next_id, birth_keyframe=keyframe_id, chain_id=chain_id,
                           chain_pos=chain_pos)
        track.add(frame_index, position)
        self.tracks[track.track_id] = track
        self._next_id += 1
        return track

    def live_ids(self, frame_index=None):
        return [track_id for track_id, track in sorted(self.tracks.items())
                if track.is_live and (frame_index is None or frame_index in track.positions)]

    def positions(self, track_ids, frame_index):
        if len(track_ids) == 0:
            return np.zeros((0, 2))
        return np.array([self.tracks[track_id].positions[frame_index] for track_id in track_ids])

    def kill(self, track_ids):
        for track_id in track_ids:
            self.tracks[track_id].kill()

    def spawned_on_keyframe(self, keyframe_id):
        return [track for track in self.tracks.values() if track.birth_keyframe == keyframe_id]

    def common_ids(self, *steps):
        """Ids of tracks holding a position on every given step."""
        return [track_id for track_id, track in sorted(self.tracks.items())
                if all(track.position(step) is not None for step in steps)]


def seed_tracks(table, chains, frame_index, keyframe_id=None, min_dist=2.0, spacing=4):
    """
    Spawn tracks every `spacing` points along each chain where no live track
    on this frame lies within min_dist.
    :return: list of new track ids
    """
    grid = _GridIndex(min_dist)
    for track_id in table.live_ids(frame_index):
        grid.add(table[track_id].positions[frame_index])

    spawned = []
    for chain in chains:
        for chain_pos in range(0, len(chain.points), spacing):
            point = chain.points[chain_pos].astype(np.float64)
            if grid.has_neighbour(point, min_dist):
                continue
            grid.add(point)
            track = table.spawn(frame_index, point, keyframe_id=keyframe_id, chain_id=chain.id,
                                chain_pos=chain_pos)
            spawned.append(track.track_id)
    return spawned


def advance_tracks(table, prev_frame, next_frame, next_mask, params=None, min_dist=2.0, snap_radius=2,
                   track_ids=None):
    """
    Carry live tracks from prev_frame to next_frame through the fixed filter chain;
    tracks failing any stage die. Redundancy removal also covers tracks that already
    sit on next_frame, and a resident that loses to an older carried track dies.
    :rtype: AdvanceStats
    """
    params = params or FlowParams()
    if track_ids is None:
        track_ids = table.live_ids(prev_frame.index)
    track_ids = sorted(track_ids)
    stats = AdvanceStats(tracked=len(track_ids))
    if not track_ids:
        return stats

    original = table.positions(track_ids, prev_frame.index)
    forward = pyramidal_lk(prev_frame, next_frame, original, params)
    backward = pyramidal_lk(next_frame, prev_frame, forward.points, params)
    stats.after_flow = int(np.count_nonzero(forward.converged))

    survivors = bidirectional_filter(original, forward, backward, params.bidir_tol)
    stats.after_bidirectional = len(survivors)

    # Tracks already on next_frame take part too; scan order is track id, i.e. age
    carried = set(track_ids)
    resident_ids = [track_id for track_id in table.live_ids(next_frame.index) if track_id not in carried]
    candidate_ids = [track_ids[index] for index in survivors]
    combined = np.vstack([table.positions(resident_ids, next_frame.index), forward.points[survivors]])
    kept = dedup_points(combined, min_dist, order=np.argsort(resident_ids + candidate_ids, kind="stable"))
    table.kill([resident_ids[index] for index in sorted(set(range(len(resident_ids))) - set(kept.tolist()))])
    survivors = survivors[kept[kept >= len(resident_ids)] - len(resident_ids)]
    stats.after_dedup = len(survivors)

    survivors = survivors[snap_filter(forward.points[survivors], next_mask, snap_radius)]
    stats.after_snap = len(survivors)

    keep = set(survivors.tolist())
    for index, track_id in enumerate(track_ids):
        if index in keep:
            table[track_id].add(next_frame.index, forward.points[index])
        else:
            table[track_id].kill()

    if len(survivors):
        stats.mean_displacement = float(np.mean(np.linalg.norm(forward.points[survivors] - original[survivors],
                                                               axis=1)))
    logger.debug("Frame %d: %d tracks -> flow %d, bidirectional %d, dedup %d, snap %d"
                 % (next_frame.index, stats.tracked, stats.after_flow, stats.after_bidirectional,
                    stats.after_dedup, stats.after_snap))
    return stats


@dataclass
class TrackedFrame:
    """An accepted frame; step counts accepted frames and keys track positions."""
    step: int
    frame_index: int
    timestamp: float
    width: int
    height: int
    pixels: Optional[np.ndarray] = field(default=None, repr=False)
    mask: Optional[np.ndarray] = field(default=None, repr=False)
    chains: List = field(default_factory=list, repr=False)

    @property
    def index(self):
        return self.step


class EdgeTracker:
    """
    Image front end: edge detection, blur rejection and track propagation.
    Blurred frames are dropped before tracking, so track steps skip them.
    """

    def __init__(self, config, timer=None):
        self.config = config
        self.timer = timer
        self.params = FlowParams.from_config(config)
        self.table = TrackTable()
        self.blur_history = deque(maxlen=int(config["blur.history"]))
        self.previous = None
        self.current = None
        self.rejected_blurred = 0
        self._next_step = 0

    def _measure(self, stage):
        if self.timer is None:
            return nullcontext()
        return self.timer.measure(stage)

    def track(self, frame):
        """:return: TrackedFrame, or None when the frame is rejected as blurred"""
        with self._measure("edge"):
            mask, chains = detect_edges(frame, self.config)
            verdict = blur_verdict(frame, mask, self.blur_history, fraction=self.config["blur.fraction"],
                                   bootstrap=self.config["blur.bootstrap"])
        if not verdict.sharp:
            self.rejected_blurred += 1
            logger.info("Frame %d rejected as blurred (variance %.1f < %.1f)"
                        % (frame.index, verdict.variance, verdict.threshold))
            return None
        self.blur_history.append(verdict.variance)

        tracked = TrackedFrame(step=self._next_step, frame_index=frame.index, timestamp=frame.timestamp,
                               width=frame.width, height=frame.height, pixels=frame.pixels, mask=mask,
                               chains=chains)
        self._next_step += 1
        if self.current is not None:
            with self._measure("flow"):
                advance_tracks(self.table, self.current, tracked, mask, self.params,
                               min_dist=self.config["flow.min_dist"], snap_radius=self.config["flow.snap_radius"])
        self.previous, self.current = self.current, tracked
        return tracked

    def seed(self, tracked_frame, keyframe_id=None):
        """
        Spawn tracks on the chains of a keyframe. When the keyframe is the previous
        frame the new tracks are carried on to the current one.
        """
        new_ids = seed_tracks(self.table, tracked_frame.chains, tracked_frame.step, keyframe_id=keyframe_id,
                              min_dist=self.config["flow.min_dist"], spacing=self.config["flow.track_spacing"])
        if new_ids and self.previous is tracked_frame and self.current is not None:
            with self._measure("flow"):
                advance_tracks(self.table, self.previous, self.current, self.current.mask, self.params,
                               min_dist=self.config["flow.min_dist"], snap_radius=self.config["flow.snap_radius"],
                               track_ids=new_ids)
        return new_ids
