#!/usr/bin/env python3

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from edgeslam.mvg_core import Pose, skew

logger = logging.getLogger(__name__)

"""
Sparse Levenberg-Marquardt on the reprojection cost
    sum_ij V_ij * huber(|| P(C_j, B_i) - x_ij ||)
Cameras carry 6 free parameters (rotation increment, centre), points 3.
Focal length and radial distortion are fixed from calibration.
"""

MIN_DEPTH = 1e-9
BEHIND_CAMERA_RESIDUAL = 1e3
MAX_DAMPING = 1e16
RESIDUAL_FORMS = ("standard", "literal")


@dataclass
class BACamera:
    rotation: np.ndarray
    center: np.ndarray
    fixed: bool = False


@dataclass
class BAProblem:
    cameras: List[BACamera]
    points: np.ndarray
    cam_idx: np.ndarray
    pt_idx: np.ndarray
    pixels: np.ndarray
    intrinsics: object
    point_fixed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.cam_idx = np.asarray(self.cam_idx, dtype=np.int64).reshape(-1)
        self.pt_idx = np.asarray(self.pt_idx, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if self.point_fixed is None:
            self.point_fixed = np.zeros(len(self.points), dtype=bool)
        self.point_fixed = np.asarray(self.point_fixed, dtype=bool)

        n_obs = len(self.cam_idx)
        if len(self.pt_idx) != n_obs or len(self.pixels) != n_obs:
            raise ValueError("Observation arrays differ in length")
        if n_obs:
            if self.cam_idx.min() < 0 or self.cam_idx.max() >= len(self.cameras):
                raise ValueError("Observation references a missing camera")
            if self.pt_idx.min() < 0 or self.pt_idx.max() >= len(self.points):
                raise ValueError("Observation references a missing point")
            pairs = self.cam_idx * max(len(self.points), 1) + self.pt_idx
            if len(np.unique(pairs)) != n_obs:
                raise ValueError("A point is observed twice by the same camera")

    @property
    def n_observations(self):
        return len(self.cam_idx)

    def free_camera_indices(self):
        return [index for index, camera in enumerate(self.cameras) if not camera.fixed]

    def free_point_indices(self):
        return np.nonzero(~self.point_fixed)[0]

    def n_camera_params(self):
        return 6 * len(self.free_camera_indices())

    def n_params(self):
        return self.n_camera_params() + 3 * len(self.free_point_indices())


@dataclass
class LMOptions:
    max_iters: int = 50
    initial_damping: float = 1e-3
    function_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-12
    huber_delta: float = 2.0
    residual_form: str = "standard"

    def __post_init__(self):
        if self.residual_form not in RESIDUAL_FORMS:
            raise ValueError("Unknown residual form %r" % self.residual_form)
        for name in ("max_iters", "initial_damping", "function_tolerance", "parameter_tolerance", "huber_delta"):
            if not getattr(self, name) > 0:
                raise ValueError("LM option %s must be positive" % name)

    @classmethod
    def from_config(cls, config, global_run=False):
        return cls(max_iters=config["ba.max_iters_global"] if global_run else config["ba.max_iters"],
                   initial_damping=config["ba.initial_damping"],
                   function_tolerance=config["ba.function_tol"],
                   parameter_tolerance=config["ba.parameter_tol"],
                   huber_delta=config["ba.huber_px"],
                   residual_form=config["ba.residual_form"])


@dataclass
class LMReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_history: List[float] = field(default_factory=list)
    message: str = ""


def project(camera, point, intrinsics):
    """Pixel of a single point, radial distortion applied to the normalized coordinate."""
    camera_point = camera.rotation @ (np.asarray(point, dtype=np.float64) - camera.center)
    if camera_point[2] <= MIN_DEPTH:
        raise ValueError("Point is not in front of the camera")
    normalized = camera_point[:2] / camera_point[2]
    normalized = normalized * (1.0 + intrinsics.r * normalized @ normalized)
    return np.array([intrinsics.fx * normalized[0] + intrinsics.cx,
                     intrinsics.fy * normalized[1] + intrinsics.cy])


def _stack_cameras(problem):
    rotations = np.array([camera.rotation for camera in problem.cameras]).reshape(-1, 3, 3)
    centers = np.array([camera.center for camera in problem.cameras]).reshape(-1, 3)
    return rotations, centers


def _parameter_columns(problem):
    cam_col = np.full(len(problem.cameras), -1, dtype=np.int64)
    for order, index in enumerate(problem.free_camera_indices()):
        cam_col[index] = 6 * order
    pt_col = np.full(len(problem.points), -1, dtype=np.int64)
    offset = problem.n_camera_params()
    pt_col[problem.free_point_indices()] = offset + 3 * np.arange(len(problem.free_point_indices()))
    return cam_col, pt_col


def residuals_and_jacobian(problem, residual_form="standard", with_jacobian=True):
    """
    :return: (residuals (2*n_obs,), sparse Jacobian (2*n_obs, n_params) or None)
    """
    n_obs = problem.n_observations
    n_params = problem.n_params()
    if n_obs == 0:
        return np.zeros(0), (sp.csr_matrix((0, n_params)) if with_jacobian else None)

    intrinsics = problem.intrinsics
    focal = np.array([intrinsics.fx, intrinsics.fy])
    principal = np.array([intrinsics.cx, intrinsics.cy])
    rotations, centers = _stack_cameras(problem)
    rotation = rotations[problem.cam_idx]
    camera_points = np.einsum("oij,oj->oi", rotation, problem.points[problem.pt_idx] - centers[problem.cam_idx])

    depth = camera_points[:, 2]
    in_front = depth > MIN_DEPTH
    safe_depth = np.where(in_front, depth, 1.0)
    normalized = camera_points[:, :2] / safe_depth[:, None]

    r = intrinsics.r
    if residual_form == "standard":
        psi = 1.0 + r * np.sum(normalized ** 2, axis=1)
        predicted = principal + focal * normalized * psi[:, None]
        target = problem.pixels
    elif residual_form == "literal":
        # Distortion applied to the measurement, prediction left undistorted
        predicted = principal + focal * normalized
        measured = (problem.pixels - principal) / focal
        target = principal + focal * measured * (1.0 + r * np.sum(measured ** 2, axis=1))[:, None]
    else:
        raise ValueError("Unknown residual form %r" % residual_form)

    residuals = predicted - target
    residuals[~in_front] = BEHIND_CAMERA_RESIDUAL
    residuals = residuals.ravel()
    if not with_jacobian:
        return residuals, None

    inv_depth = 1.0 / safe_depth
    d_norm = np.zeros((n_obs, 2, 3))
    d_norm[:, 0, 0] = inv_depth
    d_norm[:, 1, 1] = inv_depth
    d_norm[:, :, 2] = -normalized * inv_depth[:, None]

    if residual_form == "standard":
        d_dist = psi[:, None, None] * np.eye(2) + 2.0 * r * np.einsum("oi,oj->oij", normalized, normalized)
        d_pixel = focal[None, :, None] * np.einsum("oij,ojk->oik", d_dist, d_norm)
    else:
        d_pixel = focal[None, :, None] * d_norm
    d_pixel[~in_front] = 0.0

    camera_skew = np.zeros((n_obs, 3, 3))
    camera_skew[:, 0, 1] = -camera_points[:, 2]
    camera_skew[:, 0, 2] = camera_points[:, 1]
    camera_skew[:, 1, 0] = camera_points[:, 2]
    camera_skew[:, 1, 2] = -camera_points[:, 0]
    camera_skew[:, 2, 0] = -camera_points[:, 1]
    camera_skew[:, 2, 1] = camera_points[:, 0]

    jac_rotation = -np.einsum("oij,ojk->oik", d_pixel, camera_skew)
    jac_center = -np.einsum("oij,ojk->oik", d_pixel, rotation)
    jac_point = np.einsum("oij,ojk->oik", d_pixel, rotation)
    jac_camera = np.concatenate([jac_rotation, jac_center], axis=2)

    cam_col, pt_col = _parameter_columns(problem)
    obs_rows = 2 * np.arange(n_obs)

    rows, cols, values = [], [], []
    for block, columns, width in ((jac_camera, cam_col[problem.cam_idx], 6),
                                  (jac_point, pt_col[problem.pt_idx], 3)):
        free = columns >= 0
        if not np.any(free):
            continue
        block_rows = obs_rows[free][:, None, None] + np.arange(2)[None, :, None]
        block_cols = columns[free][:, None, None] + np.arange(width)[None, None, :]
        rows.append(np.broadcast_to(block_rows, (np.count_nonzero(free), 2, width)).ravel())
        cols.append(np.broadcast_to(block_cols, (np.count_nonzero(free), 2, width)).ravel())
        values.append(block[free].ravel())

    if rows:
        jacobian = sp.csr_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(2 * n_obs, n_params))
    else:
        jacobian = sp.csr_matrix((2 * n_obs, n_params))
    return residuals, jacobian


def observation_errors(problem, residual_form="standard"):
    residuals, _ = residuals_and_jacobian(problem, residual_form=residual_form, with_jacobian=False)
    return np.linalg.norm(residuals.reshape(-1, 2), axis=1)


def reprojection_rms(problem):
    errors = observation_errors(problem)
    if len(errors) == 0:
        return 0.0
    return float(np.sqrt(np.mean(errors ** 2)))


def robust_cost(residuals, huber_delta):
    squared = np.sum(residuals.reshape(-1, 2) ** 2, axis=1)
    norms = np.sqrt(squared)
    rho = np.where(norms <= huber_delta, squared, 2.0 * huber_delta * norms - huber_delta ** 2)
    return 0.5 * float(np.sum(rho))


def huber_weights(residuals, huber_delta):
    norms = np.linalg.norm(residuals.reshape(-1, 2), axis=1)
    weights = np.ones_like(norms)
    large = norms > huber_delta
    weights[large] = huber_delta / norms[large]
    return np.repeat(weights, 2)


def apply_update(problem, delta):
    """New problem with the parameter increment applied; fixed cameras and points are shared untouched."""
    cameras = []
    order = 0
    for camera in problem.cameras:
        if camera.fixed:
            cameras.append(camera)
            continue
        step = delta[6 * order:6 * order + 6]
        order += 1
        cameras.append(BACamera(Rotation.from_rotvec(step[:3]).as_matrix() @ camera.rotation,
                                camera.center + step[3:],
                                fixed=False))

    points = problem.points.copy()
    free_points = problem.free_point_indices()
    offset = problem.n_camera_params()
    points[free_points] += delta[offset:].reshape(-1, 3)
    return replace(problem, cameras=cameras, points=points)


def _point_blocks(hessian_pp, n_points):
    index = np.arange(3 * n_points)
    block_rows = np.repeat(index.reshape(-1, 3), 3, axis=1).ravel()
    block_cols = np.tile(index.reshape(-1, 3), (1, 3)).ravel()
    values = np.asarray(hessian_pp[block_rows, block_cols]).ravel()
    return values.reshape(n_points, 3, 3)


def _solve_dense(matrix, rhs):
    try:
        factor = scipy.linalg.cho_factor(matrix)
        return scipy.linalg.cho_solve(factor, rhs)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        return np.linalg.lstsq(matrix, rhs, rcond=None)[0]


def solve_normal_equations(hessian, gradient, n_camera_params, use_schur=True):
    """
    Solve hessian * delta = -gradient, eliminating the 3x3 point blocks first when use_schur is set.
    """
    hessian = sp.csr_matrix(hessian)
    n_params = hessian.shape[0]
    if n_params == 0:
        return np.zeros(0)
    if not use_schur:
        return _solve_dense(hessian.toarray(), -gradient)

    nc = n_camera_params
    n_points = (n_params - nc) // 3
    g_c = gradient[:nc]
    g_p = gradient[nc:]
    if n_points == 0:
        return _solve_dense(hessian.toarray(), -gradient)

    blocks = _point_blocks(hessian[nc:, nc:], n_points)
    try:
        blocks_inv = np.linalg.inv(blocks)
    except np.linalg.LinAlgError:
        blocks_inv = np.linalg.pinv(blocks)
    v_inv = sp.bsr_matrix((blocks_inv, np.arange(n_points), np.arange(n_points + 1)),
                          shape=(3 * n_points, 3 * n_points))

    if nc == 0:
        return -(v_inv @ g_p)

    h_cc = hessian[:nc, :nc].toarray()
    h_cp = hessian[:nc, nc:]
    w = (h_cp @ v_inv).tocsr()
    schur = h_cc - (w @ h_cp.T).toarray()
    rhs = -g_c + w @ g_p
    delta_c = _solve_dense(schur, rhs)
    delta_p = v_inv @ (-g_p - h_cp.T @ delta_c)
    return np.concatenate([delta_c, delta_p])


def lm_minimize(problem, options=None, use_schur=True):
    """
    :return: (optimized BAProblem, LMReport); the input problem is not modified
    """
    options = options or LMOptions()
    form = options.residual_form
    residuals, jacobian = residuals_and_jacobian(problem, residual_form=form)
    cost = robust_cost(residuals, options.huber_delta)
    report = LMReport(iterations=0, initial_cost=cost, final_cost=cost, cost_history=[cost])

    if problem.n_params() == 0 or problem.n_observations == 0:
        report.message = "nothing to optimize"
        return problem, report

    n_camera_params = problem.n_camera_params()
    damping = options.initial_damping
    current = problem

    for _ in range(options.max_iters):
        if cost == 0.0:
            report.message = "zero cost"
            break
        weights = huber_weights(residuals, options.huber_delta)
        weighted = jacobian.multiply(weights[:, None]).tocsr()
        hessian = (jacobian.T @ weighted).tocsr()
        gradient = weighted.T @ residuals
        diagonal = np.maximum(hessian.diagonal(), 1e-12)

        accepted = False
        while damping <= MAX_DAMPING:
            damped = hessian + sp.diags(damping * diagonal)
            delta = solve_normal_equations(damped, gradient, n_camera_params, use_schur=use_schur)
            scale = np.linalg.norm(current.points) + sum(np.linalg.norm(camera.center) for camera in current.cameras)
            if np.linalg.norm(delta) <= options.parameter_tolerance * (scale + options.parameter_tolerance):
                report.message = "parameter tolerance reached"
                break

            candidate = apply_update(current, delta)
            candidate_residuals, candidate_jacobian = residuals_and_jacobian(candidate, residual_form=form)
            candidate_cost = robust_cost(candidate_residuals, options.huber_delta)
            if candidate_cost < cost:
                accepted = True
                improvement = cost - candidate_cost
                current, residuals, jacobian, cost = candidate, candidate_residuals, candidate_jacobian, candidate_cost
                damping = max(damping / 10.0, 1e-15)
                report.iterations += 1
                report.cost_history.append(cost)
                if improvement <= options.function_tolerance * max(report.cost_history[-2], 1e-300):
                    report.message = "function tolerance reached"
                break
            damping *= 10.0

        if not accepted:
            if damping > MAX_DAMPING:
                report.message = "damping overflow, returning best parameters"
                logger.warning("LM damping overflow after %d iterations (cost %.6g)" % (report.iterations, cost))
            break
        if report.message:
            break
    else:
        report.message = "maximum iterations reached"

    report.final_cost = cost
    logger.debug("LM: %d iterations, cost %.6g -> %.6g (%s)"
                 % (report.iterations, report.initial_cost, report.final_cost, report.message))
    return current, report


def _collect_problem(slam_map, free_ids, fixed_ids, point_ids, fix_points=False):
    fixed = set(fixed_ids)
    keyframe_ids = sorted(set(free_ids) | fixed)
    cameras = []
    for kf_id in keyframe_ids:
        pose = slam_map.keyframes[kf_id].pose
        cameras.append(BACamera(pose.rotation, pose.center, fixed=kf_id in fixed))
    camera_index = {kf_id: index for index, kf_id in enumerate(keyframe_ids)}

    cam_idx, pt_idx, pixels = [], [], []
    for index, point_id in enumerate(point_ids):
        for kf_id, pixel in sorted(slam_map.points[point_id].observations.items()):
            if kf_id in camera_index:
                cam_idx.append(camera_index[kf_id])
                pt_idx.append(index)
                pixels.append(pixel)

    points = np.array([slam_map.points[point_id].position for point_id in point_ids]).reshape(-1, 3)
    problem = BAProblem(cameras=cameras, points=points, cam_idx=cam_idx, pt_idx=pt_idx,
                        pixels=np.array(pixels).reshape(-1, 2), intrinsics=slam_map.intrinsics,
                        point_fixed=np.full(len(point_ids), fix_points, dtype=bool))
    return problem, keyframe_ids


def apply_solution(slam_map, problem, keyframe_ids, point_ids, skip_keyframes=(), skip_points=()):
    """
    Write optimized free poses and points back. Entries removed meanwhile, and those listed
    in skip_keyframes / skip_points, keep their current values.
    """
    for camera, kf_id in zip(problem.cameras, keyframe_ids):
        if camera.fixed or kf_id not in slam_map.keyframes or kf_id in skip_keyframes:
            continue
        slam_map.keyframes[kf_id].pose = Pose(camera.rotation, camera.center)
    for index, point_id in enumerate(point_ids):
        if problem.point_fixed[index] or point_id not in slam_map.points or point_id in skip_points:
            continue
        slam_map.points[point_id].position = problem.points[index].copy()


def remove_outliers(slam_map, point_ids, outlier_px, keyframe_ids=None):
    """
    Drop observations whose reprojection error exceeds outlier_px, then points left with
    fewer than two observations.
    :return: (observations removed, points removed)
    """
    intrinsics = slam_map.intrinsics
    removed_observations = 0
    removed_points = 0
    for point_id in list(point_ids):
        map_point = slam_map.points.get(point_id)
        if map_point is None:
            continue
        for kf_id, pixel in list(map_point.observations.items()):
            if keyframe_ids is not None and kf_id not in keyframe_ids:
                continue
            pose = slam_map.keyframes[kf_id].pose
            try:
                predicted = project(BACamera(pose.rotation, pose.center), map_point.position, intrinsics)
                error = np.linalg.norm(predicted - pixel)
            except ValueError:
                error = np.inf
            if not error <= outlier_px:
                slam_map.remove_observation(point_id, kf_id)
                removed_observations += 1
        if len(map_point.observations) < 2:
            slam_map.remove_point(point_id)
            removed_points += 1
    if removed_observations:
        logger.debug("Outlier cut removed %d observations and %d points" % (removed_observations, removed_points))
    return removed_observations, removed_points


def local_window(slam_map, keyframe_id):
    """
    :return: (free keyframe ids, fixed keyframe ids, point ids, pose_only flag)
    """
    window = {keyframe_id} | set(slam_map.covisible(keyframe_id))
    point_ids = sorted({point_id for kf_id in window for point_id in slam_map.keyframes[kf_id].observations})
    observers = {kf_id for point_id in point_ids for kf_id in slam_map.points[point_id].observations}

    fixed = observers - window
    pose_only = window == {keyframe_id}
    if not pose_only:
        fixed.add(min(window))
    free = sorted(window - fixed)
    return free, sorted(fixed), point_ids, pose_only


def local_ba(slam_map, keyframe_id, options=None, outlier_px=6.0):
    """
    Refine the new keyframe, its covisible keyframes and the points they observe.
    Keyframes outside the window that see those points contribute fixed-camera residuals.
    :rtype: LMReport
    """
    free, fixed, point_ids, pose_only = local_window(slam_map, keyframe_id)
    problem, keyframe_ids = _collect_problem(slam_map, free, fixed, point_ids, fix_points=pose_only)
    optimized, report = lm_minimize(problem, options)
    apply_solution(slam_map, optimized, keyframe_ids, point_ids)
    remove_outliers(slam_map, point_ids, outlier_px)
    slam_map.update_covisibility()
    logger.debug("Local BA on keyframe %d: %d free, %d fixed keyframes, %d points%s"
                 % (keyframe_id, len(free), len(fixed), len(point_ids), " (pose only)" if pose_only else ""))
    return report


def build_global_problem(slam_map):
    keyframe_ids = sorted(slam_map.keyframes)
    point_ids = sorted(slam_map.points)
    problem, keyframe_ids = _collect_problem(slam_map, keyframe_ids[1:], keyframe_ids[:1], point_ids)
    return problem, keyframe_ids, point_ids


def restore_gauge_scale(problem, keyframe_ids, reference_baseline):
    """
    Rescale about the first keyframe centre so the first-to-second keyframe baseline keeps its length.
    """
    if len(keyframe_ids) < 2 or reference_baseline <= 0:
        return problem
    origin = problem.cameras[0].center
    baseline = np.linalg.norm(problem.cameras[1].center - origin)
    if baseline <= 0:
        return problem
    factor = reference_baseline / baseline
    cameras = [camera if camera.fixed else
               BACamera(camera.rotation, origin + factor * (camera.center - origin), fixed=False)
               for camera in problem.cameras]
    points = origin + factor * (problem.points - origin)
    return replace(problem, cameras=cameras, points=points)


def global_ba(slam_map, options=None, outlier_px=6.0):
    """
    Refine every keyframe and point with the first keyframe fixed and the
    first-to-second keyframe distance preserved.
    :rtype: LMReport
    """
    if len(slam_map.keyframes) < 2:
        raise ValueError("Global bundle adjustment needs at least two keyframes")

    problem, keyframe_ids, point_ids = build_global_problem(slam_map)
    reference_baseline = np.linalg.norm(problem.cameras[1].center - problem.cameras[0].center)
    optimized, report = lm_minimize(problem, options)
    optimized = restore_gauge_scale(optimized, keyframe_ids, reference_baseline)
    apply_solution(slam_map, optimized, keyframe_ids, point_ids)
    remove_outliers(slam_map, point_ids, outlier_px)
    slam_map.update_covisibility()
    slam_map.reset_global_counters()
    logger.info("Global BA over %d keyframes and %d points: cost %.6g -> %.6g"
                % (len(keyframe_ids), len(point_ids), report.initial_cost, report.final_cost))
    return report
