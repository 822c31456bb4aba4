#!/usr/bin/env python3

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from edgeslam.dataset_io import record_positions, record_timestamps
from edgeslam.mvg_core import Similarity, similarity_from_pairs

logger = logging.getLogger(__name__)

CENTIMETRES_PER_UNIT = 100.0
COLLINEAR_RATIO = 1e-9


class AssociationError(Exception):
    pass


@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    count: int
    alignment: Similarity
    degenerate: bool = False
    errors: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        return {"ate_rmse_cm": self.rmse, "ate_mean_cm": self.mean, "ate_median_cm": self.median,
                "ate_max_cm": self.max, "matched_poses": self.count, "alignment_scale": self.alignment.scale,
                "degenerate_alignment": self.degenerate}


def associate(estimated, groundtruth, max_dt=0.02):
    """
    Greedy nearest-timestamp matching: candidate pairs within max_dt are taken in order
    of increasing time difference, each record at most once.
    :return: list of (estimated record, ground-truth record) in estimated order
    """
    est_times = record_timestamps(estimated)
    gt_times = record_timestamps(groundtruth)
    candidates = []
    for est_index, timestamp in enumerate(est_times):
        low = np.searchsorted(gt_times, timestamp - max_dt, side="left")
        high = np.searchsorted(gt_times, timestamp + max_dt, side="right")
        for gt_index in range(low, high):
            candidates.append((abs(gt_times[gt_index] - timestamp), est_index, gt_index))

    used_est, used_gt, matches = set(), set(), []
    for _, est_index, gt_index in sorted(candidates):
        if est_index in used_est or gt_index in used_gt:
            continue
        used_est.add(est_index)
        used_gt.add(gt_index)
        matches.append((est_index, gt_index))

    if not matches:
        raise AssociationError("No estimated pose lies within %.3f s of a ground-truth pose" % max_dt)
    logger.info("Associated %d of %d estimated poses" % (len(matches), len(estimated)))
    return [(estimated[est_index], groundtruth[gt_index]) for est_index, gt_index in sorted(matches)]


def _is_collinear(points):
    centered = points - points.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    return singular[0] == 0 or singular[1] <= COLLINEAR_RATIO * singular[0]


def _principal_axis(points):
    centered = points - points.mean(axis=0)
    axis = np.linalg.svd(centered, full_matrices=False)[2][0]
    # Orient along the direction of travel
    if np.dot(points[-1] - points[0], axis) < 0:
        axis = -axis
    return axis


def span_alignment(source, target):
    """Rigid fit of principal axes plus the ratio of extents, for trajectories without a plane."""
    source_axis = _principal_axis(source)
    target_axis = _principal_axis(target)
    rotation = Rotation.align_vectors(target_axis[None, :], source_axis[None, :])[0].as_matrix()
    source_span = np.ptp((source - source.mean(axis=0)) @ source_axis)
    target_span = np.ptp((target - target.mean(axis=0)) @ target_axis)
    scale = target_span / source_span if source_span > 0 else 1.0
    return Similarity(scale, rotation, target.mean(axis=0) - scale * rotation @ source.mean(axis=0))


def ate_rmse(pairs):
    """
    Absolute trajectory error after similarity alignment of the estimate onto ground truth.
    Distances are reported in centimetres (trajectory units are metres).
    :rtype: AteReport
    """
    if len(pairs) < 3:
        raise ValueError("ATE needs at least 3 matched poses, got %d" % len(pairs))
    source = record_positions([estimated for estimated, _ in pairs])
    target = record_positions([groundtruth for _, groundtruth in pairs])

    degenerate = _is_collinear(source) or _is_collinear(target)
    if degenerate:
        logger.warning("Trajectory is collinear, aligning by principal axis and span ratio")
        alignment = span_alignment(source, target)
    else:
        alignment = similarity_from_pairs(source, target)

    errors = CENTIMETRES_PER_UNIT * np.linalg.norm(alignment.apply(source) - target, axis=1)
    return AteReport(rmse=float(np.sqrt(np.mean(errors ** 2))), mean=float(np.mean(errors)),
                     median=float(np.median(errors)), max=float(np.max(errors)), count=len(pairs),
                     alignment=alignment, degenerate=degenerate, errors=errors)
