#!/usr/bin/env python3

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from edgeslam.bundle_adjust import (LMOptions, apply_solution, build_global_problem, global_ba, lm_minimize,
                                    local_ba, remove_outliers, restore_gauge_scale)
from edgeslam.flow_track import three_view_filter
from edgeslam.loop_closure import (compute_mmin, detect_loop, keyframe_signature, merge_loop, validate_loop)
from edgeslam.mvg_core import (GeometryError, Pose, five_point_ransac, fundamental_ransac, pnp_resection,
                               reprojection_errors, rotation_angle, triangulate_many)
from edgeslam.slam_map import SlamMap
from edgeslam.slam_quality import QualityReport, quality_factor, straight_segments, tracks_on_segments
from edgeslam.slam_recovery import RecoveryFailed, track_loss_recovery
from edgeslam.stage_timer import StageTimer

logger = logging.getLogger(__name__)

"""
Keyframe-based monocular SLAM back end. Tracks are followed on every frame;
poses are estimated on keyframes only.
"""

MIN_ROTATION_CORRESPONDENCES = 8
INSUFFICIENT_CORRESPONDENCES = "insufficient correspondences"


class TrackingLost(Exception):
    pass


class TrackingFailed(Exception):
    """Tracking halted for good; recovery attempts are exhausted."""

    def __init__(self, frame_index, message):
        super().__init__(message)
        self.frame_index = frame_index


class InitializationFailed(Exception):
    pass


class KeyframeDecision(Enum):
    NONE = "none"
    PREVIOUS = "previous_frame_is_kf"
    CURRENT = "current_frame_is_kf"


class PipelineState(Enum):
    INITIALIZING = "initializing"
    TRACKING = "tracking"
    RECOVERING = "recovering"


@dataclass(frozen=True)
class KeyframeStats:
    """Geometry of the current frame against the last keyframe."""
    rotation_deg: float
    correspondences: int
    average_correspondences: float
    correspondences_3d2d: Optional[int]
    mean_displacement: float
    image_width: int
    seconds_since_keyframe: float
    previous_is_keyframe: bool = False


def select_keyframe(stats, config):
    """
    First matching criterion decides:
        rotation, correspondence drop, 3D-2D shortage -> previous frame
        displacement, time interval                    -> current frame
    A previous frame that already is the last keyframe hands over to the current one.
    :rtype: KeyframeDecision
    """
    if stats.rotation_deg > config["kf.rot_deg"]:
        decision = KeyframeDecision.PREVIOUS
    elif stats.average_correspondences > 0 and \
            stats.correspondences < config["kf.track_frac"] * stats.average_correspondences:
        decision = KeyframeDecision.PREVIOUS
    elif stats.correspondences_3d2d is not None and stats.correspondences_3d2d < config["kf.min_3d2d"]:
        decision = KeyframeDecision.PREVIOUS
    elif stats.mean_displacement > config["kf.disp_frac"] * stats.image_width:
        decision = KeyframeDecision.CURRENT
    elif stats.seconds_since_keyframe >= config["kf.interval_s"]:
        decision = KeyframeDecision.CURRENT
    else:
        decision = KeyframeDecision.NONE

    if decision is KeyframeDecision.PREVIOUS and stats.previous_is_keyframe:
        decision = KeyframeDecision.CURRENT
    return decision


def keyframe_attributes(tracked_frame):
    attributes = {"image": tracked_frame.pixels, "edge_mask": tracked_frame.mask, "chains": tracked_frame.chains}
    if tracked_frame.pixels is not None and tracked_frame.mask is not None:
        attributes["signature"], attributes["descriptor"] = keyframe_signature(tracked_frame.pixels,
                                                                               tracked_frame.mask)
    return attributes


@dataclass
class InitAttempt:
    reference_frame: int
    candidate_frame: int
    correspondences: int
    accepted: bool = False
    reason: str = ""
    quality: Optional[QualityReport] = None
    slam_map: Optional[SlamMap] = field(default=None, repr=False)

    def as_dict(self):
        summary = {"reference_frame": self.reference_frame, "candidate_frame": self.candidate_frame,
                   "correspondences": self.correspondences, "accepted": self.accepted, "reason": self.reason}
        if self.quality is not None:
            summary.update(self.quality.as_dict())
        return summary


@dataclass
class PendingGlobalBA:
    """A background global BA and the map values it started from."""
    future: object
    keyframe_ids: List[int]
    point_ids: List[int]
    baseline: float
    generation: int
    start_poses: dict = field(default_factory=dict, repr=False)
    start_points: dict = field(default_factory=dict, repr=False)

    @classmethod
    def submit(cls, executor, slam_map, options, generation):
        problem, keyframe_ids, point_ids = build_global_problem(slam_map)
        baseline = np.linalg.norm(problem.cameras[1].center - problem.cameras[0].center)
        poses = {kf_id: slam_map.keyframes[kf_id].pose for kf_id in keyframe_ids}
        start_poses = {kf_id: (pose.rotation.copy(), pose.center.copy()) for kf_id, pose in poses.items()}
        start_points = {point_id: slam_map.points[point_id].position.copy() for point_id in point_ids}
        return cls(future=executor.submit(lm_minimize, problem, options), keyframe_ids=keyframe_ids,
                   point_ids=point_ids, baseline=baseline, generation=generation,
                   start_poses=start_poses, start_points=start_points)

    def touched(self, slam_map):
        """
        :return: (keyframe ids, point ids) whose pose or position changed since submission
        """
        keyframes = set()
        for kf_id, (rotation, center) in self.start_poses.items():
            keyframe = slam_map.keyframes.get(kf_id)
            if keyframe is None:
                continue
            if not (np.array_equal(keyframe.pose.rotation, rotation)
                    and np.array_equal(keyframe.pose.center, center)):
                keyframes.add(kf_id)
        points = {point_id for point_id, position in self.start_points.items()
                  if point_id in slam_map.points and not np.array_equal(slam_map.points[point_id].position, position)}
        return keyframes, points


def _median_depth(slam_map, keyframe):
    if not slam_map.points:
        return 0.0
    depths = keyframe.pose.to_camera(slam_map.point_array())[:, 2]
    return float(np.median(depths))


def two_view_init(reference, candidate, table, intrinsics, config):
    """
    Try to start a map from a reference/candidate frame pair: five-point pose with the
    baseline set to 1, triangulation, bundle adjustment, then the quality check.
    :rtype: InitAttempt
    """
    track_ids = table.common_ids(reference.step, candidate.step)
    attempt = InitAttempt(reference.frame_index, candidate.frame_index, len(track_ids))
    if len(track_ids) < config["init.min_corrs"]:
        attempt.reason = INSUFFICIENT_CORRESPONDENCES
        return attempt

    pixels_a = table.positions(track_ids, reference.step)
    pixels_b = table.positions(track_ids, candidate.step)
    normalized_a = intrinsics.normalize(pixels_a)
    normalized_b = intrinsics.normalize(pixels_b)
    try:
        _, inliers, relative = five_point_ransac(
            normalized_a, normalized_b, focal=intrinsics.focal, inlier_tol=config["five.inlier_px"],
            confidence=config["ransac.confidence"], max_iters=config["ransac.max_iters"],
            rng_seed=config["ransac.seed"], min_inliers=config["five.min_inliers"])
    except GeometryError as error:
        attempt.reason = "five-point failed: %s" % error
        return attempt

    pose_a = Pose.identity()
    pose_b = relative.pose_of_b(1.0)
    points, valid = triangulate_many(pose_a, pose_b, normalized_a, normalized_b,
                                     min_parallax_deg=config["tri.min_parallax_deg"])
    keep = inliers & valid

    slam_map = SlamMap(intrinsics)
    kf_a = slam_map.add_keyframe(reference.frame_index, reference.timestamp, pose_a, step=reference.step,
                                 **keyframe_attributes(reference))
    kf_b = slam_map.add_keyframe(candidate.frame_index, candidate.timestamp, pose_b, step=candidate.step,
                                 **keyframe_attributes(candidate))
    for row in np.nonzero(keep)[0]:
        slam_map.add_point(points[row], {kf_a.id: pixels_a[row], kf_b.id: pixels_b[row]},
                           track_id=track_ids[row])
    if len(slam_map.points) >= 2:
        global_ba(slam_map, LMOptions.from_config(config, global_run=True), outlier_px=config["ba.outlier_px"])

    # Quality: straight reference segments against their reconstructed tracks
    segments = [segment for chain in reference.chains
                for segment in straight_segments(chain, max_dev=config["init.max_dev"],
                                                 min_len=config["init.segment_min_len"])]
    reference_tracks = [track for track in table.tracks.values() if track.birth_frame == reference.step]
    positions_3d = {map_point.track_id: map_point.position for map_point in slam_map.points.values()
                    if map_point.track_id is not None}
    attempt.quality = quality_factor(segments, tracks_on_segments(segments, reference_tracks), positions_3d,
                                     _median_depth(slam_map, kf_a), coverage=config["init.coverage"],
                                     collinear_frac=config["init.collinear_frac"])
    attempt.accepted = attempt.quality.accepted(config["init.quality_ratio"], config["init.quality_count"])
    if attempt.accepted:
        attempt.reason = "accepted"
        attempt.slam_map = slam_map
    else:
        attempt.reason = "low quality"
    return attempt


def three_view_check(slam_map, tracked_frame, table, config):
    """
    Reject tracks running through the last two keyframes and this frame whose middle
    position disagrees with the epilines from the outer two.
    :return: number of rejected tracks
    """
    keyframes = slam_map.ordered_keyframes()
    if len(keyframes) < 2:
        return 0
    kf_a, kf_b = keyframes[-2], keyframes[-1]
    track_ids = table.common_ids(kf_a.step, kf_b.step, tracked_frame.step)
    if len(track_ids) < config["flow.min_three_view"]:
        return 0

    ab_ids = table.common_ids(kf_a.step, kf_b.step)
    cb_ids = table.common_ids(kf_b.step, tracked_frame.step)
    try:
        f_ab, _ = fundamental_ransac(table.positions(ab_ids, kf_a.step), table.positions(ab_ids, kf_b.step),
                                     inlier_tol=config["fund.inlier_px"], confidence=config["ransac.confidence"],
                                     max_iters=config["ransac.max_iters"], rng_seed=config["ransac.seed"])
        f_cb, _ = fundamental_ransac(table.positions(cb_ids, tracked_frame.step),
                                     table.positions(cb_ids, kf_b.step),
                                     inlier_tol=config["fund.inlier_px"], confidence=config["ransac.confidence"],
                                     max_iters=config["ransac.max_iters"], rng_seed=config["ransac.seed"])
    except GeometryError as error:
        logger.warning("Skipping three-view filter: %s" % error)
        return 0

    keep = three_view_filter(table.positions(track_ids, kf_a.step), table.positions(track_ids, kf_b.step),
                             table.positions(track_ids, tracked_frame.step), f_ab, f_cb,
                             tol=config["flow.epiline_tol"], intersection_tol=config["flow.intersection_tol"])
    rejected = [track_id for track_id, kept in zip(track_ids, keep) if not kept]
    for track_id in rejected:
        table[track_id].reject(tracked_frame.step)
    logger.debug("Three-view filter rejected %d of %d tracks" % (len(rejected), len(track_ids)))
    return len(rejected)


def triangulate_new_points(slam_map, keyframe, table, config):
    """
    New points from tracks on this keyframe that have no map point yet, triangulated against
    the oldest keyframe the track reaches back to. Every keyframe on the track whose
    reprojection is within the outlier threshold gets an observation.
    :return: number of points added
    """
    intrinsics = slam_map.intrinsics
    keyframe_of_step = {kf.step: kf for kf in slam_map.keyframes.values() if kf.id != keyframe.id}
    by_partner = {}
    for track_id in table.common_ids(keyframe.step):
        if slam_map.point_for_track(track_id) is not None:
            continue
        track = table[track_id]
        steps = [step for step in sorted(keyframe_of_step) if track.position(step) is not None]
        if steps:
            by_partner.setdefault(steps[0], []).append(track_id)

    outlier_px = config["ba.outlier_px"]
    added = 0
    for partner_step, track_ids in sorted(by_partner.items()):
        partner = keyframe_of_step[partner_step]
        pixels_p = table.positions(track_ids, partner_step)
        pixels_k = table.positions(track_ids, keyframe.step)
        points, valid = triangulate_many(partner.pose, keyframe.pose, intrinsics.normalize(pixels_p),
                                         intrinsics.normalize(pixels_k),
                                         min_parallax_deg=config["tri.min_parallax_deg"])
        if not np.any(valid):
            continue
        valid &= reprojection_errors(partner.pose, points, pixels_p, intrinsics) <= outlier_px
        valid &= reprojection_errors(keyframe.pose, points, pixels_k, intrinsics) <= outlier_px
        for row in np.nonzero(valid)[0]:
            track = table[track_ids[row]]
            observations = {partner.id: pixels_p[row], keyframe.id: pixels_k[row]}
            for step, other in keyframe_of_step.items():
                position = track.position(step)
                if other.id in observations or position is None:
                    continue
                error = reprojection_errors(other.pose, points[row:row + 1], position.reshape(1, 2), intrinsics)[0]
                if error <= outlier_px:
                    observations[other.id] = position
            slam_map.add_point(points[row], observations, track_id=track.track_id)
            added += 1
    return added


def track_new_keyframe(slam_map, tracked_frame, table, config, timer=None):
    """
    Place a keyframe by resection from live 3D-2D correspondences, extend the map by
    triangulation and refine locally.
    :raises TrackingLost: when resection fails or keeps too few inliers
    :rtype: Keyframe
    """
    timer = timer or StageTimer()
    three_view_check(slam_map, tracked_frame, table, config)

    with timer.measure("pose"):
        track_ids = [track_id for track_id in table.common_ids(tracked_frame.step)
                     if slam_map.point_for_track(track_id) is not None]
        if len(track_ids) < config["pnp.min_inliers"]:
            raise TrackingLost("Only %d 3D-2D correspondences on frame %d"
                               % (len(track_ids), tracked_frame.frame_index))
        point_ids = [slam_map.point_for_track(track_id) for track_id in track_ids]
        points_3d = np.array([slam_map.points[point_id].position for point_id in point_ids])
        pixels = table.positions(track_ids, tracked_frame.step)
        try:
            pose, inliers = pnp_resection(points_3d, pixels, slam_map.intrinsics, inlier_tol=config["pnp.inlier_px"],
                                          confidence=config["ransac.confidence"],
                                          max_iters=config["ransac.max_iters"], rng_seed=config["ransac.seed"],
                                          min_inliers=config["pnp.min_inliers"])
        except GeometryError as error:
            raise TrackingLost("Resection failed on frame %d: %s" % (tracked_frame.frame_index, error))

    with timer.measure("map"):
        keyframe = slam_map.add_keyframe(tracked_frame.frame_index, tracked_frame.timestamp, pose,
                                         step=tracked_frame.step, **keyframe_attributes(tracked_frame))
        for point_id, pixel, inlier in zip(point_ids, pixels, inliers):
            if inlier:
                slam_map.add_observation(point_id, keyframe.id, pixel)
        added = triangulate_new_points(slam_map, keyframe, table, config)
        slam_map.update_covisibility()

    with timer.measure("local_ba"):
        local_ba(slam_map, keyframe.id, LMOptions.from_config(config), outlier_px=config["ba.outlier_px"])
    logger.info("Keyframe %d (frame %d): %d resection inliers, %d new points, %d points in map"
                % (keyframe.id, keyframe.frame_index, np.count_nonzero(inliers), added, len(slam_map.points)))
    return keyframe


class EdgeSlam:
    """
    Frame-by-frame driver: keyframe selection, initialization, tracking, recovery,
    loop closure and the global bundle adjustment schedule.
    The tracker owns the track table and spawns tracks on every keyframe.
    """

    def __init__(self, intrinsics, tracker, config, timer=None):
        self.intrinsics = intrinsics
        self.tracker = tracker
        self.config = config
        self.timer = timer or StageTimer()
        self.state = PipelineState.INITIALIZING
        self.slam_map = None
        self.reference = None
        self.last_keyframe_frame = None
        self.previous = None
        self.correspondence_counts: List[int] = []
        self.init_attempts: List[InitAttempt] = []
        self.recoveries = 0
        self.failed_recoveries = 0
        self.loops_closed = 0
        self.last_frame_index = None
        self._executor = None
        self._pending_global = None
        self._map_generation = 0

    @property
    def table(self):
        return self.tracker.table

    @property
    def initialized(self):
        return self.slam_map is not None

    def process(self, tracked_frame):
        """Feed one accepted frame."""
        self.last_frame_index = tracked_frame.frame_index
        if self.last_keyframe_frame is None:
            self._set_reference(tracked_frame)
        else:
            with self.timer.measure("keyframe"):
                stats = self.frame_stats(tracked_frame)
                decision = select_keyframe(stats, self.config)
            if decision is KeyframeDecision.PREVIOUS:
                self._on_keyframe(self.previous)
            elif decision is KeyframeDecision.CURRENT:
                self._on_keyframe(tracked_frame)
        self.previous = tracked_frame

    def frame_stats(self, tracked_frame):
        last = self.last_keyframe_frame
        track_ids = self.table.common_ids(last.step, tracked_frame.step)
        pixels_last = self.table.positions(track_ids, last.step)
        pixels_now = self.table.positions(track_ids, tracked_frame.step)

        average = float(np.mean(self.correspondence_counts)) if self.correspondence_counts else 0.0
        self.correspondence_counts.append(len(track_ids))

        correspondences_3d2d = None
        if self.slam_map is not None:
            correspondences_3d2d = sum(1 for track_id in self.table.common_ids(tracked_frame.step)
                                       if self.slam_map.point_for_track(track_id) is not None)

        displacement = 0.0
        if len(track_ids):
            displacement = float(np.mean(np.linalg.norm(pixels_now - pixels_last, axis=1)))

        return KeyframeStats(rotation_deg=self._pairwise_rotation(pixels_last, pixels_now),
                             correspondences=len(track_ids), average_correspondences=average,
                             correspondences_3d2d=correspondences_3d2d, mean_displacement=displacement,
                             image_width=tracked_frame.width,
                             seconds_since_keyframe=tracked_frame.timestamp - last.timestamp,
                             previous_is_keyframe=self.previous is None or self.previous is last)

    def _pairwise_rotation(self, pixels_a, pixels_b):
        if len(pixels_a) < MIN_ROTATION_CORRESPONDENCES:
            return 0.0
        try:
            _, _, relative = five_point_ransac(
                self.intrinsics.normalize(pixels_a), self.intrinsics.normalize(pixels_b),
                focal=self.intrinsics.focal, inlier_tol=self.config["five.inlier_px"],
                confidence=self.config["ransac.confidence"], max_iters=self.config["ransac.max_iters"],
                rng_seed=self.config["ransac.seed"], min_inliers=MIN_ROTATION_CORRESPONDENCES)
        except GeometryError:
            return 0.0
        return rotation_angle(relative.rotation)

    def _set_reference(self, tracked_frame):
        self.reference = tracked_frame
        self.last_keyframe_frame = tracked_frame
        self.correspondence_counts = []
        self.tracker.seed(tracked_frame)
        logger.info("Initialization reference set to frame %d" % tracked_frame.frame_index)

    def _on_keyframe(self, tracked_frame):
        if self.slam_map is None:
            self._try_initialize(tracked_frame)
        else:
            self._insert_keyframe(tracked_frame)

    def _try_initialize(self, candidate):
        with self.timer.measure("pose"):
            attempt = two_view_init(self.reference, candidate, self.table, self.intrinsics, self.config)
        self.init_attempts.append(attempt)

        if attempt.accepted:
            self.slam_map = attempt.slam_map
            self.state = PipelineState.TRACKING
            self.last_keyframe_frame = candidate
            self.correspondence_counts = []
            self.tracker.seed(candidate, self.slam_map.last_keyframe.id)
            logger.info("Initialized from frames %d and %d: quality %.3f, %d points"
                        % (attempt.reference_frame, attempt.candidate_frame, attempt.quality.ratio,
                           len(self.slam_map.points)))
        elif attempt.reason == INSUFFICIENT_CORRESPONDENCES:
            logger.info("Frames %d and %d share %d correspondences, restarting initialization"
                        % (attempt.reference_frame, attempt.candidate_frame, attempt.correspondences))
            self._set_reference(candidate)
        else:
            logger.info("Initialization pair (%d, %d) rejected: %s"
                        % (attempt.reference_frame, attempt.candidate_frame, attempt.reason))

    def _insert_keyframe(self, tracked_frame):
        self._collect_global_ba()
        if self.state is PipelineState.RECOVERING:
            keyframe = self._recover(tracked_frame)
        else:
            try:
                keyframe = track_new_keyframe(self.slam_map, tracked_frame, self.table, self.config, self.timer)
            except TrackingLost as lost:
                logger.warning("Tracking lost: %s" % lost)
                self.state = PipelineState.RECOVERING
                keyframe = self._recover(tracked_frame)
        if keyframe is None:
            return

        self.last_keyframe_frame = tracked_frame
        self.tracker.seed(tracked_frame, keyframe.id)
        self.slam_map.note_local_ba()
        self._close_loops(keyframe)
        if self.slam_map.global_ba_due(keyframe.timestamp, self.config["ba.global_interval_kf"],
                                       self.config["ba.global_interval_s"]):
            self._run_global_ba(keyframe.timestamp)

    def _recover(self, tracked_frame):
        try:
            with self.timer.measure("pose"):
                keyframe, _ = track_loss_recovery(self.slam_map, tracked_frame, self.table, self.config,
                                                  keyframe_attributes(tracked_frame))
        except RecoveryFailed as failure:
            self.failed_recoveries += 1
            logger.warning("Recovery attempt %d on frame %d failed: %s"
                           % (self.failed_recoveries, tracked_frame.frame_index, failure))
            if self.failed_recoveries >= self.config["recovery.max_attempts"]:
                self.relocalize(tracked_frame)
            return None
        self.recoveries += 1
        self.failed_recoveries = 0
        self.state = PipelineState.TRACKING
        return keyframe

    def relocalize(self, tracked_frame):
        """No relocalization is attempted: tracking stops here."""
        logger.error("Relocalization unavailable, tracking stops at frame %d" % tracked_frame.frame_index)
        raise TrackingFailed(tracked_frame.frame_index,
                             "Track-loss recovery failed %d times" % self.failed_recoveries)

    def _close_loops(self, keyframe):
        if not self.config["loop.enabled"] or keyframe.signature is None:
            return
        with self.timer.measure("loop"):
            m_min = compute_mmin(self.slam_map, keyframe, self.config)
            if m_min is None:
                return
            candidate = detect_loop(self.slam_map, keyframe, m_min, self.config)
            if candidate is None:
                return
            candidate = validate_loop(self.slam_map, keyframe, candidate, self.config)
            if candidate is None:
                return
            self._collect_global_ba(wait=True)
            merge_loop(self.slam_map, keyframe, candidate, self.config)
        self._map_generation += 1
        self.loops_closed += 1

    def _run_global_ba(self, timestamp):
        options = LMOptions.from_config(self.config, global_run=True)
        if not self.config["ba.async_global"]:
            with self.timer.measure("global_ba"):
                global_ba(self.slam_map, options, outlier_px=self.config["ba.outlier_px"])
            return
        if self._pending_global is not None:
            return
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1)
        self._pending_global = PendingGlobalBA.submit(self._executor, self.slam_map, options, self._map_generation)
        self.slam_map.reset_global_counters(timestamp)
        logger.info("Global BA started in the background over %d keyframes" % len(self._pending_global.keyframe_ids))

    def _collect_global_ba(self, wait=False):
        """
        Apply a finished background global BA. Keyframes and points refined since it was
        submitted keep their newer values; a loop merge in between discards the whole result.
        """
        pending = self._pending_global
        if pending is None:
            return
        if not wait and not pending.future.done():
            return
        self._pending_global = None
        optimized, report = pending.future.result()
        if pending.generation != self._map_generation:
            logger.info("Discarding background global BA: a loop was merged meanwhile")
            return
        skip_keyframes, skip_points = pending.touched(self.slam_map)
        optimized = restore_gauge_scale(optimized, pending.keyframe_ids, pending.baseline)
        apply_solution(self.slam_map, optimized, pending.keyframe_ids, pending.point_ids,
                       skip_keyframes=skip_keyframes, skip_points=skip_points)
        remove_outliers(self.slam_map, pending.point_ids, self.config["ba.outlier_px"])
        self.slam_map.update_covisibility()
        logger.info("Background global BA applied: cost %.6g -> %.6g, %d keyframes and %d points kept newer values"
                    % (report.initial_cost, report.final_cost, len(skip_keyframes), len(skip_points)))

    def finish(self):
        """Wait for background work and return the map (None when never initialized)."""
        self._collect_global_ba(wait=True)
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        return self.slam_map
