#!/usr/bin/env python3

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from edgeslam.bundle_adjust import LMOptions, global_ba
from edgeslam.flow_track import FlowParams, bidirectional_filter, pyramidal_lk
from edgeslam.mvg_core import GeometryError, Similarity, horn_similarity, project

logger = logging.getLogger(__name__)

"""
Loop closure on keyframes: a Hu-moment signature of the edge mask plus a 4x4 grid
descriptor (edge count, edge density, mean intensity per cell) score candidate
keyframes; a similarity fitted on 3D-3D pairs closes the loop.
"""

GRID = 4
WEIGHT_FLOOR = 1e-3
MIN_RUN = 3
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class QuadrantDescriptor:
    counts: np.ndarray     # 8-connected edge components per cell
    density: np.ndarray    # edge pixels per cell pixel
    intensity: np.ndarray  # mean gray level

    @property
    def statistics(self):
        return np.vstack([self.counts, self.density, self.intensity]).astype(np.float64)


@dataclass
class LoopCandidate:
    keyframe_id: int
    score: float
    similarity: Optional[Similarity] = None
    inliers: int = 0
    pairs: List[Tuple[int, int]] = field(default_factory=list, repr=False)  # (current point, loop point)


def moment_signature(mask):
    """
    The seven Hu moment invariants of a binary mask on a log scale, -sign(h) log10|h|.
    :raises ValueError: for an empty mask
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("An empty mask has no moment signature")
    hu = cv2.HuMoments(cv2.moments(mask.astype(np.uint8), binaryImage=True)).ravel()
    signature = np.zeros(7)
    nonzero = hu != 0
    signature[nonzero] = -np.sign(hu[nonzero]) * np.log10(np.abs(hu[nonzero]))
    return signature


def _cell_bounds(length, grid=GRID):
    edges = np.linspace(0, length, grid + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def quadrant_descriptor(pixels, mask, grid=GRID):
    pixels = np.asarray(getattr(pixels, "pixels", pixels), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    counts, density, intensity = [], [], []
    for top, bottom in _cell_bounds(mask.shape[0], grid):
        for left, right in _cell_bounds(mask.shape[1], grid):
            cell = mask[top:bottom, left:right]
            _, n_components = ndimage.label(cell, structure=EIGHT_CONNECTED)
            counts.append(n_components)
            density.append(cell.mean() if cell.size else 0.0)
            intensity.append(pixels[top:bottom, left:right].mean() if cell.size else 0.0)
    return QuadrantDescriptor(np.array(counts, dtype=np.float64), np.array(density), np.array(intensity))


def descriptor_weights(desc_a, desc_b):
    """Inverse-variance weights of the three statistics, normalized to sum to one."""
    pooled = np.hstack([desc_a.statistics, desc_b.statistics])
    means = pooled.mean(axis=1)
    safe = np.where(means > 0, means, 1.0)
    variances = np.where(means > 0, np.var(pooled / safe[:, None], axis=1), 0.0)
    weights = 1.0 / (variances + WEIGHT_FLOOR)
    return weights / weights.sum()


def quadrant_match(desc_a, desc_b, tol=0.25, weights=None):
    """Fraction of grid cells whose weighted relative difference stays within tol."""
    stats_a = desc_a.statistics
    stats_b = desc_b.statistics
    scale = np.maximum(np.abs(stats_a), np.abs(stats_b))
    difference = np.where(scale > 0, np.abs(stats_a - stats_b) / np.where(scale > 0, scale, 1.0), 0.0)
    if weights is None:
        weights = descriptor_weights(desc_a, desc_b)
    per_cell = np.asarray(weights) @ difference
    return float(np.mean(per_cell <= tol))


def match_score(kf_a, kf_b, tau=1.0, tol=0.25):
    """Mean of the signature similarity exp(-L1/tau) and the matched-cell fraction."""
    distance = float(np.sum(np.abs(kf_a.signature - kf_b.signature)))
    return 0.5 * (math.exp(-distance / tau) + quadrant_match(kf_a.descriptor, kf_b.descriptor, tol))


def keyframe_signature(pixels, mask):
    """:return: (moment signature, quadrant descriptor), or (None, None) for an empty mask"""
    try:
        signature = moment_signature(mask)
    except ValueError:
        return None, None
    return signature, quadrant_descriptor(pixels, mask)


def _score(kf_a, kf_b, config):
    return match_score(kf_a, kf_b, tau=config["loop.tau"], tol=config["loop.quadrant_tol"])


def _viewing_angle(pose_a, pose_b):
    cosine = float(np.dot(pose_a.viewing_direction, pose_b.viewing_direction))
    return math.degrees(math.acos(min(1.0, max(-1.0, cosine))))


def compute_mmin(slam_map, keyframe, config):
    """
    Lowest score between keyframe and its most recent earlier keyframes looking the same way.
    :return: the score, or None when no such neighbour exists
    """
    neighbours = []
    for other in reversed(slam_map.ordered_keyframes()):
        if other.id >= keyframe.id or other.signature is None:
            continue
        if _viewing_angle(keyframe.pose, other.pose) < config["loop.neighbor_deg"]:
            neighbours.append(other)
            if len(neighbours) == config["loop.neighbor_count"]:
                break
    if not neighbours:
        return None
    return min(_score(keyframe, other, config) for other in neighbours)


def detect_loop(slam_map, keyframe, m_min, config, min_run=MIN_RUN):
    """
    Earlier keyframes sharing no map point with keyframe and scoring above m_min,
    in runs of at least min_run consecutive keyframes. The best-scoring member of
    any run wins.
    """
    best = None
    run = []

    def close_run():
        nonlocal best
        if len(run) >= min_run:
            top = max(run, key=lambda candidate: candidate.score)
            if best is None or top.score > best.score:
                best = top

    for other in slam_map.ordered_keyframes():
        if other.id >= keyframe.id:
            break
        score = None
        if other.signature is not None and slam_map.shared_count(keyframe.id, other.id) == 0:
            score = _score(keyframe, other, config)
        if score is not None and score > m_min:
            run.append(LoopCandidate(other.id, score))
        else:
            close_run()
            run = []
    close_run()

    if best is not None:
        logger.info("Loop candidate for keyframe %d: keyframe %d (score %.3f > %.3f)"
                    % (keyframe.id, best.keyframe_id, best.score, m_min))
    return best


def loop_correspondences(slam_map, keyframe, candidate_kf, config):
    """
    Pair map points of the candidate with map points of keyframe: candidate observations are
    flowed into the keyframe image and matched to its own observations within loop.merge_px.
    :return: list of (current point id, loop point id)
    """
    if keyframe.image is None or candidate_kf.image is None:
        return []
    loop_ids = sorted(candidate_kf.observations)
    current_ids = sorted(point_id for point_id in keyframe.observations if point_id not in candidate_kf.observations)
    if not loop_ids or not current_ids:
        return []

    params = FlowParams.from_config(config)
    origins = np.array([candidate_kf.observations[point_id] for point_id in loop_ids])
    forward = pyramidal_lk(candidate_kf.image, keyframe.image, origins, params)
    backward = pyramidal_lk(keyframe.image, candidate_kf.image, forward.points, params)
    survivors = bidirectional_filter(origins, forward, backward, params.bidir_tol)

    tree = cKDTree(np.array([keyframe.observations[point_id] for point_id in current_ids]))
    distances, nearest = tree.query(forward.points[survivors], distance_upper_bound=config["loop.merge_px"])
    pairs = []
    used = set()
    for survivor, distance, index in zip(survivors, distances, nearest):
        if not np.isfinite(distance) or index in used:
            continue
        used.add(index)
        pairs.append((current_ids[index], loop_ids[survivor]))
    return pairs


def validate_loop(slam_map, keyframe, candidate, config, pairs=None):
    """
    Fit the similarity carrying the current side onto the loop side.
    :return: candidate with similarity and inlier pairs, or None when rejected
    """
    if pairs is None:
        pairs = loop_correspondences(slam_map, keyframe, slam_map.keyframes[candidate.keyframe_id], config)
    pairs = [(current_id, loop_id) for current_id, loop_id in pairs
             if current_id != loop_id and current_id in slam_map.points and loop_id in slam_map.points]
    min_inliers = config["loop.min_inliers"]
    if len(pairs) <= min_inliers:
        logger.info("Loop with keyframe %d rejected: %d 3D-3D pairs" % (candidate.keyframe_id, len(pairs)))
        return None

    source = np.array([slam_map.points[current_id].position for current_id, _ in pairs])
    target = np.array([slam_map.points[loop_id].position for _, loop_id in pairs])
    try:
        similarity, inliers = horn_similarity(source, target, inlier_tol=config["loop.horn_tol"],
                                              confidence=config["ransac.confidence"],
                                              max_iters=config["ransac.max_iters"], rng_seed=config["ransac.seed"])
    except GeometryError as error:
        logger.info("Loop with keyframe %d rejected: %s" % (candidate.keyframe_id, error))
        return None

    count = int(np.count_nonzero(inliers))
    if count <= min_inliers:
        logger.info("Loop with keyframe %d rejected: %d similarity inliers" % (candidate.keyframe_id, count))
        return None
    return replace(candidate, similarity=similarity, inliers=count,
                   pairs=[pair for pair, inlier in zip(pairs, inliers) if inlier])


def _mergeable(slam_map, drop_id, keep_id):
    if drop_id == keep_id or drop_id not in slam_map.points or keep_id not in slam_map.points:
        return False
    return not set(slam_map.points[drop_id].observations) & set(slam_map.points[keep_id].observations)


def merge_loop(slam_map, keyframe, candidate, config):
    """
    Move the current neighbourhood by the loop similarity, fuse duplicated points into
    their loop-side counterparts and run global bundle adjustment.
    :return: number of fused points
    """
    similarity = candidate.similarity
    loop_side = {candidate.keyframe_id} | set(slam_map.covisible(candidate.keyframe_id))
    current_side = ({keyframe.id} | set(slam_map.covisible(keyframe.id))) - loop_side
    current_points = {point_id for kf_id in current_side for point_id in slam_map.keyframes[kf_id].observations}
    loop_points = {point_id for kf_id in loop_side for point_id in slam_map.keyframes[kf_id].observations}
    moved = current_points - loop_points

    for kf_id in current_side:
        slam_map.keyframes[kf_id].pose = similarity.apply_to_pose(slam_map.keyframes[kf_id].pose)
    for point_id in moved:
        slam_map.points[point_id].position = similarity.apply(slam_map.points[point_id].position)

    fused = 0
    for current_id, loop_id in candidate.pairs:
        if _mergeable(slam_map, current_id, loop_id):
            slam_map.merge_points(loop_id, current_id)
            fused += 1

    # Fuse by projection: loop points landing on a current-side observation
    merge_px = config["loop.merge_px"]
    for kf_id in sorted(current_side):
        current_kf = slam_map.keyframes[kf_id]
        own = sorted(point_id for point_id in current_kf.observations if point_id in moved)
        others = sorted(point_id for point_id in loop_points
                        if point_id in slam_map.points and kf_id not in slam_map.points[point_id].observations)
        if not own or not others:
            continue
        tree = cKDTree(np.array([current_kf.observations[point_id] for point_id in own]))
        pixels, depth = project(current_kf.pose, np.array([slam_map.points[p].position for p in others]),
                                slam_map.intrinsics)
        distances, nearest = tree.query(pixels, distance_upper_bound=merge_px)
        for loop_id, distance, index, z in zip(others, distances, nearest, depth):
            if z > 0 and np.isfinite(distance) and _mergeable(slam_map, own[index], loop_id):
                slam_map.merge_points(loop_id, own[index])
                fused += 1

    slam_map.update_covisibility()
    logger.info("Loop closed between keyframes %d and %d: %d keyframes moved, %d points fused (scale %.4f)"
                % (keyframe.id, candidate.keyframe_id, len(current_side), fused, similarity.scale))
    global_ba(slam_map, LMOptions.from_config(config, global_run=True), outlier_px=config["ba.outlier_px"])
    return fused
