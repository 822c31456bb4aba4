#!/usr/bin/env python3

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Dict, List, Optional

import numpy as np

from edgeslam.mvg_core import Pose

logger = logging.getLogger(__name__)

COVISIBILITY_MIN_SHARED = 100


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    observations: Dict[int, np.ndarray] = field(default_factory=dict)  # keyframe id -> pixel
    track_id: Optional[int] = None
    inlier: bool = True


@dataclass
class Keyframe:
    id: int
    frame_index: int
    timestamp: float
    pose: Pose
    step: Optional[int] = None  # tracker step the keyframe was taken on
    image: np.ndarray = field(default=None, repr=False)
    edge_mask: np.ndarray = field(default=None, repr=False)
    chains: List = field(default_factory=list, repr=False)
    track_positions: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    observations: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)  # point id -> pixel
    signature: Optional[np.ndarray] = field(default=None, repr=False)
    descriptor: Optional[object] = field(default=None, repr=False)


@dataclass
class MapSnapshot:
    """Geometry and bookkeeping of a SlamMap at one moment; keyframe images are shared, not copied."""
    keyframes: Dict[int, Keyframe]
    poses: Dict[int, Pose]
    keyframe_observations: Dict[int, Dict[int, np.ndarray]]
    points: Dict[int, MapPoint]
    track_to_point: Dict[int, int]
    covisibility: Dict[int, Dict[int, int]]
    counters: tuple


def _copy_point(map_point):
    return replace(map_point, position=map_point.position.copy(), observations=dict(map_point.observations))


class SlamMap:
    """
    Keyframes, map points and the observations tying them together.
    Observations are held on both sides; use the methods here to keep them in step.
    """

    def __init__(self, intrinsics, covisibility_min=COVISIBILITY_MIN_SHARED):
        self.intrinsics = intrinsics
        self.covisibility_min = covisibility_min
        self.keyframes: Dict[int, Keyframe] = {}
        self.points: Dict[int, MapPoint] = {}
        self.track_to_point: Dict[int, int] = {}
        self.covisibility: Dict[int, Dict[int, int]] = {}
        self.keyframes_since_global = 0
        self.last_global_time = None
        self.global_ba_runs = 0
        self._next_keyframe_id = 0
        self._next_point_id = 0

    def __len__(self):
        return len(self.keyframes)

    @property
    def last_keyframe(self):
        if not self.keyframes:
            return None
        return self.keyframes[max(self.keyframes)]

    def ordered_keyframes(self):
        return [self.keyframes[kf_id] for kf_id in sorted(self.keyframes)]

    def add_keyframe(self, frame_index, timestamp, pose, **attributes):
        keyframe = Keyframe(id=self._next_keyframe_id, frame_index=frame_index, timestamp=timestamp,
                            pose=pose, **attributes)
        self._next_keyframe_id += 1
        self.keyframes[keyframe.id] = keyframe
        self.covisibility.setdefault(keyframe.id, {})
        if self.last_global_time is None:
            self.last_global_time = timestamp
        return keyframe

    def remove_keyframe(self, kf_id):
        """Drop a keyframe with its observations; points left with fewer than two observations go too."""
        keyframe = self.keyframes.pop(kf_id)
        for point_id in list(keyframe.observations):
            map_point = self.points[point_id]
            map_point.observations.pop(kf_id, None)
            if len(map_point.observations) < 2:
                self.remove_point(point_id)
        self.covisibility.pop(kf_id, None)
        for neighbours in self.covisibility.values():
            neighbours.pop(kf_id, None)

    def add_point(self, position, observations=None, track_id=None):
        map_point = MapPoint(id=self._next_point_id, position=np.asarray(position, dtype=np.float64).copy(),
                             track_id=track_id)
        self._next_point_id += 1
        self.points[map_point.id] = map_point
        for kf_id, pixel in (observations or {}).items():
            self.add_observation(map_point.id, kf_id, pixel)
        if track_id is not None:
            self.track_to_point[track_id] = map_point.id
        return map_point

    def add_observation(self, point_id, kf_id, pixel):
        pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
        self.points[point_id].observations[kf_id] = pixel
        self.keyframes[kf_id].observations[point_id] = pixel

    def remove_observation(self, point_id, kf_id):
        self.points[point_id].observations.pop(kf_id, None)
        self.keyframes[kf_id].observations.pop(point_id, None)

    def remove_point(self, point_id):
        map_point = self.points.pop(point_id)
        for kf_id in map_point.observations:
            self.keyframes[kf_id].observations.pop(point_id, None)
        if map_point.track_id is not None and self.track_to_point.get(map_point.track_id) == point_id:
            del self.track_to_point[map_point.track_id]

    def merge_points(self, keep_id, drop_id):
        """
        Unify two map points: observations of drop_id move onto keep_id.
        A keyframe observing both keeps its keep_id observation.
        """
        if keep_id == drop_id:
            return
        dropped = self.points[drop_id]
        for kf_id, pixel in list(dropped.observations.items()):
            if kf_id not in self.points[keep_id].observations:
                self.add_observation(keep_id, kf_id, pixel)
        if dropped.track_id is not None:
            self.track_to_point[dropped.track_id] = keep_id
            dropped.track_id = None
        self.remove_point(drop_id)

    def point_for_track(self, track_id):
        return self.track_to_point.get(track_id)

    def shared_points(self, kf_a, kf_b):
        observed_a = self.keyframes[kf_a].observations
        observed_b = self.keyframes[kf_b].observations
        return set(observed_a).intersection(observed_b)

    def shared_count(self, kf_a, kf_b):
        return len(self.shared_points(kf_a, kf_b))

    def update_covisibility(self):
        """Recount shared points for every keyframe pair that shares any."""
        counts = defaultdict(int)
        for map_point in self.points.values():
            for kf_a, kf_b in combinations(sorted(map_point.observations), 2):
                counts[(kf_a, kf_b)] += 1
        self.covisibility = {kf_id: {} for kf_id in self.keyframes}
        for (kf_a, kf_b), count in counts.items():
            self.covisibility[kf_a][kf_b] = count
            self.covisibility[kf_b][kf_a] = count

    def covisible(self, kf_id):
        """Keyframes sharing more than covisibility_min points with kf_id."""
        return sorted(other for other, count in self.covisibility.get(kf_id, {}).items()
                      if count > self.covisibility_min)

    def shares_any_point(self, kf_a, kf_b):
        return self.covisibility.get(kf_a, {}).get(kf_b, 0) > 0

    def snapshot(self):
        return MapSnapshot(keyframes=dict(self.keyframes),
                           poses={kf_id: keyframe.pose.copy() for kf_id, keyframe in self.keyframes.items()},
                           keyframe_observations={kf_id: dict(keyframe.observations)
                                                  for kf_id, keyframe in self.keyframes.items()},
                           points={point_id: _copy_point(map_point) for point_id, map_point in self.points.items()},
                           track_to_point=dict(self.track_to_point),
                           covisibility={kf_id: dict(neighbours) for kf_id, neighbours in self.covisibility.items()},
                           counters=(self._next_keyframe_id, self._next_point_id, self.keyframes_since_global,
                                     self.last_global_time, self.global_ba_runs))

    def restore(self, snapshot):
        """Return to the state captured by snapshot(); ids handed out since are reused."""
        self.keyframes = dict(snapshot.keyframes)
        for kf_id, keyframe in self.keyframes.items():
            keyframe.pose = snapshot.poses[kf_id].copy()
            keyframe.observations = dict(snapshot.keyframe_observations[kf_id])
        self.points = {point_id: _copy_point(map_point) for point_id, map_point in snapshot.points.items()}
        self.track_to_point = dict(snapshot.track_to_point)
        self.covisibility = {kf_id: dict(neighbours) for kf_id, neighbours in snapshot.covisibility.items()}
        (self._next_keyframe_id, self._next_point_id, self.keyframes_since_global,
         self.last_global_time, self.global_ba_runs) = snapshot.counters

    def point_array(self):
        if not self.points:
            return np.zeros((0, 3))
        return np.array([self.points[point_id].position for point_id in sorted(self.points)])

    def note_local_ba(self):
        self.keyframes_since_global += 1

    def global_ba_due(self, timestamp, interval_kf=25, interval_s=25.0):
        if len(self.keyframes) < 2:
            return False
        if self.keyframes_since_global >= interval_kf:
            return True
        return self.last_global_time is not None and timestamp - self.last_global_time >= interval_s

    def reset_global_counters(self, timestamp=None):
        self.keyframes_since_global = 0
        if timestamp is None and self.keyframes:
            timestamp = self.last_keyframe.timestamp
        self.last_global_time = timestamp
        self.global_ba_runs += 1
