#!/usr/bin/env python3

import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

"""
Conventions:
    Pose stores the world->camera rotation R and the camera centre C; x_cam = R (X - C), t = -R C.
    Relative poses map frame a to frame b: x_b = R_ab x_a + t_ab.
    Fundamental matrices satisfy x_b^T F_ab x_a = 0, so F_ab x_a is a line in image b.
"""

ORTHONORMAL_TOL = 1e-9
REPROJECT_TOL = 1e-6
COLLINEAR_TOL = 1e-9
MIN_LINE_NORM = 1e-12


class GeometryError(Exception):
    pass


def skew(vector):
    x, y, z = vector
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def nearest_rotation(matrix):
    u, _, vt = np.linalg.svd(matrix)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        u[:, -1] *= -1
        rotation = u @ vt
    return rotation


def _checked_rotation(rotation):
    rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    deviation = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if deviation > REPROJECT_TOL or abs(np.linalg.det(rotation) - 1.0) > REPROJECT_TOL:
        raise GeometryError("Matrix is not a rotation (orthonormality error %.3g)" % deviation)
    if deviation > ORTHONORMAL_TOL * 0.1:
        rotation = nearest_rotation(rotation)
    return rotation


@dataclass
class Pose:
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        self.rotation = _checked_rotation(self.rotation)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rt(cls, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation, -rotation.T @ np.asarray(translation, dtype=np.float64).reshape(3))

    @property
    def translation(self):
        return -self.rotation @ self.center

    @property
    def viewing_direction(self):
        # camera z-axis in world coordinates
        return self.rotation[2].copy()

    def to_camera(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (points - self.center) @ self.rotation.T

    def projection_matrix(self):
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])

    def copy(self):
        return Pose(self.rotation.copy(), self.center.copy())


@dataclass
class RelativePose:
    rotation: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.rotation = _checked_rotation(self.rotation)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(direction)
        if norm < MIN_LINE_NORM:
            raise GeometryError("Relative pose needs a non-zero translation direction")
        self.direction = direction / norm

    def pose_of_b(self, baseline=1.0):
        """Pose of frame b when frame a is the world origin."""
        return Pose.from_rt(self.rotation, baseline * self.direction)


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("Similarity scale must be positive, got %r" % self.scale)
        self.scale = float(self.scale)
        self.rotation = _checked_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self):
        rotation_inv = self.rotation.T
        return Similarity(1.0 / self.scale, rotation_inv, -(rotation_inv @ self.translation) / self.scale)

    def compose(self, other):
        """self after other."""
        return Similarity(self.scale * other.scale,
                          self.rotation @ other.rotation,
                          self.scale * self.rotation @ other.translation + self.translation)

    def apply_to_pose(self, pose):
        return Pose(pose.rotation @ self.rotation.T, self.apply(pose.center))


def relative_pose(pose_a, pose_b):
    """(R_ab, t_ab) with x_b = R_ab x_a + t_ab."""
    rotation = pose_b.rotation @ pose_a.rotation.T
    return rotation, pose_b.rotation @ (pose_a.center - pose_b.center)


def compose_center(pose_a, center_in_a):
    """World position of a camera whose centre is given in the frame of camera a."""
    return pose_a.center + pose_a.rotation.T @ np.asarray(center_in_a, dtype=np.float64)


def essential_from_poses(pose_a, pose_b):
    rotation, translation = relative_pose(pose_a, pose_b)
    return skew(translation) @ rotation


def fundamental_from_poses(pose_a, pose_b, intrinsics):
    k_inv = np.linalg.inv(intrinsics.matrix)
    return k_inv.T @ essential_from_poses(pose_a, pose_b) @ k_inv


def radial_factor(normalized, r):
    return 1.0 + r * np.sum(normalized ** 2, axis=-1)


def project_points(rotation, center, points, intrinsics, distort=True):
    """
    :return: (pixels (N,2), depths (N,))
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    camera = (points - np.asarray(center, dtype=np.float64)) @ np.asarray(rotation).T
    depth = camera[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        normalized = camera[:, :2] / depth[:, None]
    if distort and intrinsics.r != 0.0:
        normalized = normalized * radial_factor(normalized, intrinsics.r)[:, None]
    pixels = np.column_stack([intrinsics.fx * normalized[:, 0] + intrinsics.cx,
                              intrinsics.fy * normalized[:, 1] + intrinsics.cy])
    return pixels, depth


def project(pose, points, intrinsics, distort=True):
    return project_points(pose.rotation, pose.center, points, intrinsics, distort=distort)


def _as_points(points, width):
    return np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, width))


def five_point_ransac(x_a, x_b, focal=1.0, inlier_tol=1.0, confidence=0.99, max_iters=1000,
                      rng_seed=0, min_inliers=50):
    """
    Essential matrix from normalized correspondences with the five-point solver inside RANSAC.
    :param focal: pixels per normalized unit, converts inlier_tol from pixels
    :return: (E, inlier mask, RelativePose)
    """
    x_a = _as_points(x_a, 2)
    x_b = _as_points(x_b, 2)
    if len(x_a) < 5 or len(x_a) != len(x_b):
        raise GeometryError("Five-point needs at least 5 paired correspondences, got %d" % len(x_a))

    cv2.setRNGSeed(int(rng_seed))
    essential, ransac_mask = cv2.findEssentialMat(x_a, x_b, np.eye(3), method=cv2.RANSAC,
                                                  prob=confidence, threshold=inlier_tol / focal,
                                                  maxIters=int(max_iters))
    if essential is None or ransac_mask is None:
        raise GeometryError("Five-point RANSAC found no model")
    essential = essential[:3]

    # Project onto the essential manifold
    u, _, vt = np.linalg.svd(essential)
    essential = u @ np.diag([1.0, 1.0, 0.0]) @ vt

    inliers = ransac_mask.ravel().astype(bool)
    if np.count_nonzero(inliers) < min_inliers:
        raise GeometryError("Five-point RANSAC kept %d inliers, need %d" % (np.count_nonzero(inliers), min_inliers))

    pose_mask = inliers.astype(np.uint8).reshape(-1, 1)
    _, rotation, translation, _ = cv2.recoverPose(essential, x_a, x_b, np.eye(3), mask=pose_mask)
    logger.debug("Five-point: %d/%d inliers" % (np.count_nonzero(inliers), len(inliers)))
    return essential, inliers, RelativePose(rotation, translation.ravel())


def fundamental_ransac(p_a, p_b, inlier_tol=1.0, confidence=0.99, max_iters=1000, rng_seed=0):
    """
    :return: (F_ab, inlier mask)
    """
    p_a = _as_points(p_a, 2)
    p_b = _as_points(p_b, 2)
    if len(p_a) < 8:
        raise GeometryError("Fundamental matrix needs at least 8 correspondences, got %d" % len(p_a))
    cv2.setRNGSeed(int(rng_seed))
    fundamental, mask = cv2.findFundamentalMat(p_a, p_b, cv2.FM_RANSAC, inlier_tol, confidence, int(max_iters))
    if fundamental is None or mask is None:
        raise GeometryError("Fundamental RANSAC found no model")
    return fundamental[:3], mask.ravel().astype(bool)


def _rays(pose, normalized):
    rays = np.column_stack([normalized, np.ones(len(normalized))]) @ pose.rotation
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def parallax_degrees(pose_a, pose_b, n_a, n_b):
    """Angle between the back-projected rays of normalized correspondences."""
    cosine = np.sum(_rays(pose_a, n_a) * _rays(pose_b, n_b), axis=1)
    return np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))


def _dlt_rows(projection, normalized):
    return np.stack([normalized[:, 0, None] * projection[2] - projection[0],
                     normalized[:, 1, None] * projection[2] - projection[1]], axis=1)


def triangulate_many(pose_a, pose_b, n_a, n_b, min_parallax_deg=1.0):
    """
    Linear triangulation of normalized correspondences.
    :return: (points (N,3), valid mask) where valid means enough parallax and positive depth in both views
    """
    n_a = np.asarray(n_a, dtype=np.float64).reshape(-1, 2)
    n_b = np.asarray(n_b, dtype=np.float64).reshape(-1, 2)
    if len(n_a) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)

    system = np.concatenate([_dlt_rows(pose_a.projection_matrix(), n_a),
                             _dlt_rows(pose_b.projection_matrix(), n_b)], axis=1)
    _, _, vt = np.linalg.svd(system)
    homogeneous = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        points = homogeneous[:, :3] / homogeneous[:, 3:4]

    depth_a = pose_a.to_camera(points)[:, 2]
    depth_b = pose_b.to_camera(points)[:, 2]
    valid = (np.all(np.isfinite(points), axis=1) & (depth_a > 0) & (depth_b > 0) &
             (parallax_degrees(pose_a, pose_b, n_a, n_b) >= min_parallax_deg))
    return points, valid


def triangulate(pose_a, pose_b, x_a, x_b, intrinsics, min_parallax_deg=1.0):
    """
    DLT triangulation of one pixel correspondence refined on the two reprojection errors.
    :return: (point, reprojection errors in pixels)
    """
    x_a = np.asarray(x_a, dtype=np.float64).reshape(1, 2)
    x_b = np.asarray(x_b, dtype=np.float64).reshape(1, 2)
    n_a = intrinsics.normalize(x_a)
    n_b = intrinsics.normalize(x_b)

    parallax = parallax_degrees(pose_a, pose_b, n_a, n_b)[0]
    if not parallax >= min_parallax_deg:
        raise GeometryError("Parallax %.3f deg is below %.3f deg" % (parallax, min_parallax_deg))

    points, _ = triangulate_many(pose_a, pose_b, n_a, n_b, min_parallax_deg=0.0)
    initial = points[0]
    if not np.all(np.isfinite(initial)):
        raise GeometryError("Linear triangulation is degenerate")

    observed = np.vstack([x_a, x_b])

    def residuals(point):
        pixels_a, _ = project(pose_a, point, intrinsics)
        pixels_b, _ = project(pose_b, point, intrinsics)
        return (np.vstack([pixels_a, pixels_b]) - observed).ravel()

    refined = least_squares(residuals, initial, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15).x
    if np.linalg.norm(residuals(refined)) > np.linalg.norm(residuals(initial)):
        refined = initial

    if pose_a.to_camera(refined)[0, 2] <= 0 or pose_b.to_camera(refined)[0, 2] <= 0:
        raise GeometryError("Triangulated point is behind a camera")

    errors = np.linalg.norm(residuals(refined).reshape(2, 2), axis=1)
    return refined, errors


def _is_degenerate_plane(points_3d, normalized):
    # Coplanar structure seen edge-on: the camera centre lies in the plane
    centered = points_3d - points_3d.mean(axis=0)
    singular_3d = np.linalg.svd(centered, compute_uv=False)
    planar = singular_3d[-1] <= COLLINEAR_TOL * max(singular_3d[0], 1.0)
    centered_2d = normalized - normalized.mean(axis=0)
    singular_2d = np.linalg.svd(centered_2d, compute_uv=False)
    collinear = singular_2d[-1] <= 1e-9 * max(singular_2d[0], 1e-12)
    return planar and collinear


def reprojection_errors(pose, points_3d, pixels, intrinsics):
    projected, depth = project(pose, points_3d, intrinsics)
    errors = np.linalg.norm(projected - pixels, axis=1)
    errors[~(depth > 0)] = np.inf
    return errors


def pnp_resection(points_3d, pixels, intrinsics, inlier_tol=2.0, confidence=0.99, max_iters=1000,
                  rng_seed=0, min_inliers=30):
    """
    Camera pose from 3D-2D correspondences: EPnP hypotheses in RANSAC, LM refinement on the inliers.
    :return: (Pose, inlier mask)
    """
    points_3d = _as_points(points_3d, 3)
    pixels = _as_points(pixels, 2)
    if len(points_3d) < 4 or len(points_3d) != len(pixels):
        raise GeometryError("Resection needs at least 4 paired correspondences, got %d" % len(points_3d))
    if _is_degenerate_plane(points_3d, intrinsics.normalize(pixels)):
        raise GeometryError("Degenerate resection: camera centre lies in the plane of the points")

    camera_matrix = intrinsics.matrix
    dist_coeffs = intrinsics.dist_coeffs
    cv2.setRNGSeed(int(rng_seed))
    found, rvec, tvec, ransac_inliers = cv2.solvePnPRansac(points_3d, pixels, camera_matrix, dist_coeffs,
                                                           iterationsCount=int(max_iters),
                                                           reprojectionError=float(inlier_tol),
                                                           confidence=float(confidence),
                                                           flags=cv2.SOLVEPNP_EPNP)
    if not found or ransac_inliers is None or len(ransac_inliers) < max(min_inliers, 4):
        count = 0 if ransac_inliers is None else len(ransac_inliers)
        raise GeometryError("Resection kept %d inliers, need %d" % (count, min_inliers))

    ransac_inliers = ransac_inliers.ravel()
    criteria = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_COUNT, 100, 1e-15)
    rvec, tvec = cv2.solvePnPRefineLM(points_3d[ransac_inliers], pixels[ransac_inliers], camera_matrix,
                                      dist_coeffs, rvec, tvec, criteria=criteria)

    rotation, _ = cv2.Rodrigues(rvec)
    pose = Pose.from_rt(rotation, tvec.ravel())
    inliers = reprojection_errors(pose, points_3d, pixels, intrinsics) <= inlier_tol
    if np.count_nonzero(inliers) < min_inliers:
        raise GeometryError("Resection kept %d inliers after refinement, need %d"
                            % (np.count_nonzero(inliers), min_inliers))
    return pose, inliers


def epiline(fundamental, x, transpose=False):
    """
    Epipolar line of pixel x, normalized so that (a, b) has unit length.
    :param transpose: use F^T (line in the first image for a point in the second)
    """
    matrix = np.asarray(fundamental, dtype=np.float64)
    if transpose:
        matrix = matrix.T
    line = matrix @ np.array([x[0], x[1], 1.0])
    norm = math.hypot(line[0], line[1])
    if norm < MIN_LINE_NORM:
        raise GeometryError("Degenerate epiline (point at the epipole)")
    return line / norm


def rotation_angle(rotation):
    """Rotation angle of a 3x3 rotation matrix in degrees."""
    cosine = (np.trace(rotation) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cosine))))


def similarity_from_pairs(source, target, with_scale=True):
    """
    Closed-form absolute orientation (unit quaternion) mapping source onto target.
    :rtype: Similarity
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) < 3 or len(source) != len(target):
        raise GeometryError("Similarity needs at least 3 paired points, got %d" % len(source))

    source_mean = source.mean(axis=0)
    target_mean = target.mean(axis=0)
    p = source - source_mean
    q = target - target_mean

    m = p.T @ q
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([[sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
                  [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
                  [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
                  [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz]])
    _, eigenvectors = np.linalg.eigh(n)
    w, x, y, z = eigenvectors[:, -1]
    rotation = Rotation.from_quat([x, y, z, w]).as_matrix()

    scale = 1.0
    if with_scale:
        denominator = np.sum(p ** 2)
        if denominator <= 0:
            raise GeometryError("Similarity source points coincide")
        scale = float(np.sum(q * (p @ rotation.T)) / denominator)
        if scale <= 0:
            raise GeometryError("Similarity fit gave non-positive scale %.3g" % scale)

    return Similarity(scale, rotation, target_mean - scale * rotation @ source_mean)


def _collinear(points):
    spread = np.linalg.norm(points[1] - points[0]) * np.linalg.norm(points[2] - points[0])
    area = np.linalg.norm(np.cross(points[1] - points[0], points[2] - points[0]))
    return spread == 0 or area <= COLLINEAR_TOL * spread


def horn_similarity(source, target, inlier_tol, confidence=0.99, max_iters=1000, rng_seed=0):
    """
    Similarity between two 3D point sets, robust to outliers: closed-form fits of
    3-point samples scored by ||T(p) - q||, refit on the best inlier set.
    :return: (Similarity, inlier mask)
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    n_pairs = len(source)
    if n_pairs < 3 or n_pairs != len(target):
        raise GeometryError("Similarity RANSAC needs at least 3 paired points, got %d" % n_pairs)

    rng = np.random.default_rng(rng_seed)
    best_inliers = None
    best_count = 0
    needed = max_iters
    iteration = 0
    attempts = 0
    while iteration < needed and attempts < 10 * max_iters:
        attempts += 1
        sample = rng.choice(n_pairs, size=3, replace=False)
        if _collinear(source[sample]) or _collinear(target[sample]):
            continue
        iteration += 1
        try:
            model = similarity_from_pairs(source[sample], target[sample])
        except GeometryError:
            continue
        inliers = np.linalg.norm(model.apply(source) - target, axis=1) <= inlier_tol
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_count = count
            best_inliers = inliers
            inlier_ratio = count / n_pairs
            if inlier_ratio >= 1.0:
                needed = iteration
            else:
                needed = min(max_iters, int(math.ceil(math.log(1.0 - confidence) /
                                                      math.log(1.0 - inlier_ratio ** 3))))

    if best_inliers is None or best_count < 3:
        raise GeometryError("No non-collinear similarity sample found")

    model = similarity_from_pairs(source[best_inliers], target[best_inliers])
    inliers = np.linalg.norm(model.apply(source) - target, axis=1) <= inlier_tol
    if np.count_nonzero(inliers) >= 3 and not np.array_equal(inliers, best_inliers):
        model = similarity_from_pairs(source[inliers], target[inliers])
        inliers = np.linalg.norm(model.apply(source) - target, axis=1) <= inlier_tol
    return model, inliers
