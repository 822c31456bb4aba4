#!/usr/bin/env python3

import logging
from dataclasses import dataclass, field

import numpy as np

from edgeslam.bundle_adjust import BACamera, BAProblem, LMOptions, lm_minimize, local_ba, observation_errors
from edgeslam.mvg_core import GeometryError, Pose, five_point_ransac, pnp_resection, triangulate_many

logger = logging.getLogger(__name__)

"""
Track-loss recovery. The keyframe resection could not place is rebuilt together with the
two keyframes before it in a local frame anchored on the last keyframe (origin, identity
rotation), then carried into map coordinates. The scale comes from the baseline between
the two earlier keyframes:

    scale   = |c_last - c_older| / |l_last - l_older|
    c_new   = c_last + R_last^T (scale * l_new)
    R_new   = R_rel R_last
    t_new   = -R_new c_new
"""

MIN_BASELINE = 1e-9


class RecoveryFailed(Exception):
    pass


@dataclass
class TrackLossContext:
    pose_l_t2: Pose
    pose_l_t1: Pose
    pose_l_t: Pose
    points_l: np.ndarray        # (N, 3), NaN where not triangulated
    point_inliers: np.ndarray   # (N,) bool
    scale: float
    center_scaled: np.ndarray
    center_rotated: np.ndarray
    center: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    track_ids: np.ndarray = field(default=None, repr=False)

    @property
    def pose(self):
        return Pose(self.rotation, self.center)

    @property
    def inlier_count(self):
        return int(np.count_nonzero(self.point_inliers))

    def to_map(self, pose_s_t1, points_l):
        """Carry local-frame coordinates into map coordinates."""
        return pose_s_t1.center + self.scale * (np.asarray(points_l).reshape(-1, 3) @ pose_s_t1.rotation)


def scale_from_centers(center_s_t1, center_s_t2, center_l_t1, center_l_t2):
    """Ratio of the older-to-last keyframe baselines in map and local coordinates."""
    baseline_s = np.linalg.norm(np.asarray(center_s_t1, dtype=np.float64) - np.asarray(center_s_t2, dtype=np.float64))
    baseline_l = np.linalg.norm(np.asarray(center_l_t1, dtype=np.float64) - np.asarray(center_l_t2, dtype=np.float64))
    if baseline_l < MIN_BASELINE or baseline_s < MIN_BASELINE:
        raise RecoveryFailed("Scale is undefined: baselines %.3g (map) and %.3g (local)" % (baseline_s, baseline_l))
    return float(baseline_s / baseline_l)


def compose_from_local(pose_s_t1, scale, rotation_rel, center_l_t):
    """
    :param rotation_rel: rotation of the new keyframe in the local frame
    :param center_l_t: centre of the new keyframe in the local frame
    :return: (scaled centre, rotated centre, map centre, rotation, translation)
    """
    center_scaled = scale * np.asarray(center_l_t, dtype=np.float64)
    center_rotated = pose_s_t1.rotation @ pose_s_t1.center + center_scaled
    center = pose_s_t1.rotation.T @ center_rotated
    rotation = np.asarray(rotation_rel, dtype=np.float64) @ pose_s_t1.rotation
    translation = -rotation @ center
    return center_scaled, center_rotated, center, rotation, translation


def _local_bundle(pose_l_t2, pose_l_t1, pose_l_t, points_l, pixels_t2, pixels_t1, pixels_t, usable, triple,
                  intrinsics, options):
    cameras = [BACamera(pose_l_t1.rotation, pose_l_t1.center, fixed=True),
               BACamera(pose_l_t2.rotation, pose_l_t2.center),
               BACamera(pose_l_t.rotation, pose_l_t.center)]
    point_index = np.nonzero(usable)[0]
    cam_idx, pt_idx, pixels = [], [], []
    for local, index in enumerate(point_index):
        for camera, observed in ((0, pixels_t1), (2, pixels_t)):
            cam_idx.append(camera)
            pt_idx.append(local)
            pixels.append(observed[index])
        if triple[index]:
            cam_idx.append(1)
            pt_idx.append(local)
            pixels.append(pixels_t2[index])
    problem = BAProblem(cameras=cameras, points=points_l[point_index], cam_idx=cam_idx, pt_idx=pt_idx,
                        pixels=np.array(pixels), intrinsics=intrinsics)
    optimized, report = lm_minimize(problem, options)
    return optimized, point_index, report


def recover_in_local_frame(pose_s_t2, pose_s_t1, pixels_t2, pixels_t1, pixels_t, intrinsics, config):
    """
    Estimate the lost keyframe from correspondences continuing from the last keyframe.
    :param pixels_t2: positions on the older keyframe, NaN rows for tracks that do not reach back that far
    :rtype: TrackLossContext
    """
    pixels_t1 = np.asarray(pixels_t1, dtype=np.float64).reshape(-1, 2)
    pixels_t = np.asarray(pixels_t, dtype=np.float64).reshape(-1, 2)
    pixels_t2 = np.asarray(pixels_t2, dtype=np.float64).reshape(-1, 2)
    min_inliers = config["recovery.min_inliers"]
    if len(pixels_t) <= min_inliers:
        raise RecoveryFailed("Only %d correspondences continue from the last keyframe" % len(pixels_t))

    try:
        _, inliers, relative = five_point_ransac(
            intrinsics.normalize(pixels_t1), intrinsics.normalize(pixels_t), focal=intrinsics.focal,
            inlier_tol=config["five.inlier_px"], confidence=config["ransac.confidence"],
            max_iters=config["ransac.max_iters"], rng_seed=config["ransac.seed"],
            min_inliers=config["five.min_inliers"])
    except GeometryError as error:
        raise RecoveryFailed("Five-point in the local frame failed: %s" % error)

    pose_l_t1 = Pose.identity()
    pose_l_t = relative.pose_of_b(1.0)
    points_l, valid = triangulate_many(pose_l_t1, pose_l_t, intrinsics.normalize(pixels_t1),
                                       intrinsics.normalize(pixels_t),
                                       min_parallax_deg=config["tri.min_parallax_deg"])
    usable = valid & inliers
    triple = usable & np.all(np.isfinite(pixels_t2), axis=1)
    if np.count_nonzero(triple) < max(4, config["pnp.min_inliers"]):
        raise RecoveryFailed("Only %d local points are seen from the older keyframe" % np.count_nonzero(triple))

    try:
        pose_l_t2, pnp_inliers = pnp_resection(
            points_l[triple], pixels_t2[triple], intrinsics, inlier_tol=config["pnp.inlier_px"],
            confidence=config["ransac.confidence"], max_iters=config["ransac.max_iters"],
            rng_seed=config["ransac.seed"], min_inliers=config["pnp.min_inliers"])
    except GeometryError as error:
        raise RecoveryFailed("Resection of the older keyframe in the local frame failed: %s" % error)
    triple_index = np.nonzero(triple)[0]
    triple[triple_index[~pnp_inliers]] = False

    options = LMOptions.from_config(config)
    optimized, point_index, _ = _local_bundle(pose_l_t2, pose_l_t1, pose_l_t, points_l, pixels_t2, pixels_t1,
                                              pixels_t, usable, triple, intrinsics, options)

    errors = observation_errors(optimized)
    bad_points = np.unique(optimized.pt_idx[~(errors <= config["ba.outlier_px"])])
    point_inliers = np.zeros(len(pixels_t), dtype=bool)
    point_inliers[point_index] = True
    point_inliers[point_index[bad_points]] = False
    refined = np.full((len(pixels_t), 3), np.nan)
    refined[point_index] = optimized.points

    if np.count_nonzero(point_inliers) <= min_inliers:
        raise RecoveryFailed("Local reconstruction kept %d inlier points, need more than %d"
                             % (np.count_nonzero(point_inliers), min_inliers))

    pose_l_t2 = Pose(optimized.cameras[1].rotation, optimized.cameras[1].center)
    pose_l_t = Pose(optimized.cameras[2].rotation, optimized.cameras[2].center)
    scale = scale_from_centers(pose_s_t1.center, pose_s_t2.center, pose_l_t1.center, pose_l_t2.center)
    center_scaled, center_rotated, center, rotation, translation = compose_from_local(
        pose_s_t1, scale, pose_l_t.rotation, pose_l_t.center)
    logger.debug("Local frame: scale %.6f, %d inlier points" % (scale, np.count_nonzero(point_inliers)))
    return TrackLossContext(pose_l_t2=pose_l_t2, pose_l_t1=pose_l_t1, pose_l_t=pose_l_t, points_l=refined,
                            point_inliers=point_inliers, scale=scale, center_scaled=center_scaled,
                            center_rotated=center_rotated, center=center, rotation=rotation,
                            translation=translation)


def track_loss_recovery(slam_map, tracked_frame, table, config, keyframe_attributes=None):
    """
    Re-estimate the keyframe that resection could not place and add it to the map.
    On RecoveryFailed the map is left as it was.
    :return: (new Keyframe, TrackLossContext)
    """
    keyframes = slam_map.ordered_keyframes()
    if len(keyframes) < 2:
        raise RecoveryFailed("Recovery needs two estimated keyframes before the lost one")
    kf_t2, kf_t1 = keyframes[-2], keyframes[-1]

    track_ids = np.array(table.common_ids(kf_t1.step, tracked_frame.step), dtype=np.int64)
    pixels_t1 = table.positions(track_ids, kf_t1.step)
    pixels_t = table.positions(track_ids, tracked_frame.step)
    pixels_t2 = np.full((len(track_ids), 2), np.nan)
    for row, track_id in enumerate(track_ids):
        position = table[track_id].position(kf_t2.step)
        if position is not None:
            pixels_t2[row] = position

    logger.info("Recovering frame %d from %d correspondences (%d reach the older keyframe)"
                % (tracked_frame.frame_index, len(track_ids), np.count_nonzero(np.isfinite(pixels_t2[:, 0]))))
    context = recover_in_local_frame(kf_t2.pose, kf_t1.pose, pixels_t2, pixels_t1, pixels_t,
                                     slam_map.intrinsics, config)
    context.track_ids = track_ids

    # Restored when the recovered keyframe is rejected
    before = slam_map.snapshot()
    keyframe = slam_map.add_keyframe(tracked_frame.frame_index, tracked_frame.timestamp, context.pose,
                                     step=tracked_frame.step, **(keyframe_attributes or {}))
    inlier_rows = np.nonzero(context.point_inliers)[0]
    points_s = context.to_map(kf_t1.pose, context.points_l[inlier_rows])
    added = 0
    for row, point_s in zip(inlier_rows, points_s):
        track_id = int(track_ids[row])
        point_id = slam_map.point_for_track(track_id)
        if point_id is not None:
            slam_map.add_observation(point_id, keyframe.id, pixels_t[row])
            continue
        # Inlier local points the map does not hold yet
        observations = {kf_t1.id: pixels_t1[row], keyframe.id: pixels_t[row]}
        if np.all(np.isfinite(pixels_t2[row])):
            observations[kf_t2.id] = pixels_t2[row]
        slam_map.add_point(point_s, observations, track_id=track_id)
        added += 1

    slam_map.update_covisibility()
    local_ba(slam_map, keyframe.id, LMOptions.from_config(config), outlier_px=config["ba.outlier_px"])
    surviving = len(keyframe.observations)
    if surviving <= config["recovery.min_inliers"]:
        slam_map.restore(before)
        raise RecoveryFailed("Recovered keyframe keeps %d inliers after local BA, need more than %d"
                             % (surviving, config["recovery.min_inliers"]))
    logger.info("Recovered keyframe %d (frame %d): %d new points, %d observations"
                % (keyframe.id, keyframe.frame_index, added, surviving))
    return keyframe, context
