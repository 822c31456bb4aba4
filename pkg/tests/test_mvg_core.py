import unittest

import numpy as np

from edgeslam.mvg_core import (GeometryError, Pose, RelativePose, Similarity, epiline, fundamental_from_poses,
                               fundamental_ransac, five_point_ransac, horn_similarity, pnp_resection, project,
                               reprojection_errors, rotation_angle, similarity_from_pairs, triangulate,
                               triangulate_many)
from edgeslam.synthetic import default_intrinsics, points_in_front, random_rotation, rotation_about


def angle_between(u, v):
    cosine = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.arccos(np.clip(cosine, -1.0, 1.0)))


def two_view_scene(rng, n_points=100):
    """First camera at the origin, second rotated by up to ~10 degrees and moved by a unit baseline."""
    pose_a = Pose.identity()
    axis = rng.normal(size=3)
    rotation = rotation_about(axis, rng.uniform(1.0, 10.0))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    pose_b = Pose.from_rt(rotation, direction)
    points = points_in_front(rng, pose_a, n_points, depth=(4.0, 8.0), half_fov=0.4)
    return pose_a, pose_b, points


def normalized(pose, points):
    camera = pose.to_camera(points)
    return camera[:, :2] / camera[:, 2:3]


class TestPose(unittest.TestCase):

    def test_from_rt_round_trips_translation(self):
        rng = np.random.default_rng(1)
        rotation = random_rotation(rng)
        translation = rng.normal(size=3)
        pose = Pose.from_rt(rotation, translation)
        np.testing.assert_allclose(pose.translation, translation, atol=1e-12)
        np.testing.assert_allclose(pose.to_camera(pose.center), np.zeros((1, 3)), atol=1e-12)

    def test_non_rotation_rejected(self):
        with self.assertRaises(GeometryError):
            Pose(np.diag([1.0, 2.0, 1.0]), np.zeros(3))

    def test_relative_pose_needs_direction(self):
        with self.assertRaises(GeometryError):
            RelativePose(np.eye(3), np.zeros(3))

    def test_rotation_angle(self):
        self.assertAlmostEqual(rotation_angle(rotation_about((0, 0, 1), 37.0)), 37.0, places=9)
        self.assertAlmostEqual(rotation_angle(np.eye(3)), 0.0, places=12)


class TestSimilarity(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(2)
        self.similarity = Similarity(2.5, random_rotation(rng), rng.normal(size=3))
        self.points = rng.normal(size=(20, 3))

    def test_inverse(self):
        back = self.similarity.inverse().apply(self.similarity.apply(self.points))
        np.testing.assert_allclose(back, self.points, atol=1e-12)

    def test_compose_matches_sequential_application(self):
        other = Similarity(0.3, rotation_about((1, 2, 3), 40.0), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(self.similarity.compose(other).apply(self.points),
                                   self.similarity.apply(other.apply(self.points)), atol=1e-12)

    def test_pose_transform_keeps_projections(self):
        intrinsics = default_intrinsics()
        pose = Pose(rotation_about((0, 1, 0), 20.0), np.array([0.0, 0.0, -10.0]))
        pixels, _ = project(pose, self.points, intrinsics)
        moved_pixels, _ = project(self.similarity.apply_to_pose(pose), self.similarity.apply(self.points), intrinsics)
        np.testing.assert_allclose(moved_pixels, pixels, atol=1e-9)

    def test_non_positive_scale_rejected(self):
        with self.assertRaises(GeometryError):
            Similarity(0.0, np.eye(3), np.zeros(3))

    def test_closed_form_fit_is_exact(self):
        fitted = similarity_from_pairs(self.points, self.similarity.apply(self.points))
        self.assertAlmostEqual(fitted.scale, self.similarity.scale, places=10)
        np.testing.assert_allclose(fitted.rotation, self.similarity.rotation, atol=1e-10)
        np.testing.assert_allclose(fitted.translation, self.similarity.translation, atol=1e-9)

    def test_closed_form_needs_three_pairs(self):
        with self.assertRaises(GeometryError):
            similarity_from_pairs(self.points[:2], self.points[:2])

    def test_robust_fit_ignores_outliers(self):
        rng = np.random.default_rng(3)
        target = self.similarity.apply(self.points)
        target[:4] += rng.uniform(5.0, 10.0, size=(4, 3))
        fitted, inliers = horn_similarity(self.points, target, inlier_tol=1e-6, rng_seed=0)
        np.testing.assert_array_equal(inliers, np.arange(20) >= 4)
        self.assertAlmostEqual(fitted.scale, self.similarity.scale, places=9)

    def test_robust_fit_with_many_outliers(self):
        rng = np.random.default_rng(8)
        source = rng.uniform(-3.0, 3.0, size=(500, 3))
        target = self.similarity.apply(source)
        outliers = rng.choice(500, size=150, replace=False)
        target[outliers] += rng.uniform(1.0, 5.0, size=(150, 3)) * rng.choice([-1.0, 1.0], size=(150, 3))
        fitted, inliers = horn_similarity(source, target, inlier_tol=1e-6, rng_seed=0)
        self.assertLess(abs(fitted.scale - self.similarity.scale), 1e-6)
        self.assertEqual(np.count_nonzero(inliers), 350)
        self.assertFalse(inliers[outliers].any())


class TestFivePoint(unittest.TestCase):

    def test_noise_free_trials_are_exact(self):
        rng = np.random.default_rng(4)
        for trial in range(1000):
            pose_a, pose_b, points = two_view_scene(rng)
            _, inliers, relative = five_point_ransac(normalized(pose_a, points), normalized(pose_b, points),
                                                     focal=500.0, inlier_tol=1e-3, rng_seed=trial)
            self.assertTrue(inliers.all())
            self.assertLess(angle_between(relative.direction, pose_b.translation), 1e-6, trial)
            residual = relative.rotation @ pose_b.rotation.T
            self.assertLess(np.radians(rotation_angle(residual)), 1e-6, trial)

    def test_too_few_points(self):
        with self.assertRaises(GeometryError):
            five_point_ransac(np.zeros((4, 2)), np.zeros((4, 2)))

    def test_minimum_inlier_count_enforced(self):
        rng = np.random.default_rng(5)
        pose_a, pose_b, points = two_view_scene(rng, n_points=20)
        with self.assertRaises(GeometryError):
            five_point_ransac(normalized(pose_a, points), normalized(pose_b, points), focal=500.0, min_inliers=50)

    def test_majority_outliers(self):
        rng = np.random.default_rng(9)
        pose_a, pose_b, points = two_view_scene(rng, n_points=300)
        x_a, x_b = normalized(pose_a, points), normalized(pose_b, points)
        outliers = np.arange(300) < 180
        x_b[outliers] = rng.uniform(-0.4, 0.4, size=(180, 2))
        _, inliers, relative = five_point_ransac(x_a, x_b, focal=500.0, inlier_tol=1.0, confidence=0.999,
                                                 max_iters=5000, rng_seed=0)
        self.assertGreaterEqual(np.count_nonzero(inliers[~outliers]), 0.95 * 120)
        self.assertLess(angle_between(relative.direction, pose_b.translation), 1e-3)


class TestTriangulation(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(6)
        self.pose_a, self.pose_b, self.points = two_view_scene(rng, n_points=50)
        self.intrinsics = default_intrinsics()

    def test_linear_triangulation_is_exact(self):
        points, valid = triangulate_many(self.pose_a, self.pose_b, normalized(self.pose_a, self.points),
                                         normalized(self.pose_b, self.points), min_parallax_deg=0.0)
        self.assertTrue(valid.all())
        np.testing.assert_allclose(points, self.points, atol=1e-8)

    def test_points_behind_camera_invalid(self):
        behind = self.points * np.array([1.0, 1.0, -1.0])
        n_a = normalized(self.pose_a, behind)
        n_b = normalized(self.pose_b, behind)
        _, valid = triangulate_many(self.pose_a, self.pose_b, n_a, n_b, min_parallax_deg=0.0)
        self.assertFalse(valid.any())

    def test_single_point_refinement(self):
        pixels_a, _ = project(self.pose_a, self.points[0], self.intrinsics)
        pixels_b, _ = project(self.pose_b, self.points[0], self.intrinsics)
        point, errors = triangulate(self.pose_a, self.pose_b, pixels_a[0], pixels_b[0], self.intrinsics,
                                    min_parallax_deg=0.0)
        np.testing.assert_allclose(point, self.points[0], atol=1e-8)
        self.assertLess(errors.max(), 1e-6)

    def test_low_parallax_rejected(self):
        pose_b = Pose(np.eye(3), np.array([1e-4, 0.0, 0.0]))
        pixels_a, _ = project(self.pose_a, self.points[0], self.intrinsics)
        pixels_b, _ = project(pose_b, self.points[0], self.intrinsics)
        with self.assertRaises(GeometryError):
            triangulate(self.pose_a, pose_b, pixels_a[0], pixels_b[0], self.intrinsics, min_parallax_deg=1.0)


class TestResection(unittest.TestCase):

    def test_recovers_pose(self):
        rng = np.random.default_rng(7)
        intrinsics = default_intrinsics()
        pose = Pose(rotation_about((0.2, 1.0, 0.1), 25.0), np.array([0.5, -0.3, 0.2]))
        points = points_in_front(rng, pose, 80)
        pixels, _ = project(pose, points, intrinsics)
        pixels[:5] += 40.0
        estimated, inliers = pnp_resection(points, pixels, intrinsics, inlier_tol=1.0, min_inliers=30)
        np.testing.assert_array_equal(inliers, np.arange(80) >= 5)
        np.testing.assert_allclose(estimated.center, pose.center, atol=1e-6)
        self.assertLess(reprojection_errors(estimated, points[5:], pixels[5:], intrinsics).max(), 1e-6)

    def test_too_few_points(self):
        with self.assertRaises(GeometryError):
            pnp_resection(np.zeros((3, 3)), np.zeros((3, 2)), default_intrinsics())

    def test_many_outliers(self):
        rng = np.random.default_rng(10)
        intrinsics = default_intrinsics()
        pose = Pose(rotation_about((1.0, 0.3, -0.2), 15.0), np.array([-0.4, 0.2, 0.1]))
        points = points_in_front(rng, pose, 200)
        pixels, _ = project(pose, points, intrinsics)
        outliers = np.arange(200) < 80
        pixels[outliers] = rng.uniform([0.0, 0.0], [640.0, 480.0], size=(80, 2))
        estimated, inliers = pnp_resection(points, pixels, intrinsics, inlier_tol=1.0, min_inliers=30)
        self.assertGreaterEqual(np.count_nonzero(inliers[~outliers]), 0.95 * 120)
        self.assertLess(np.linalg.norm(estimated.center - pose.center), 1e-3)

    def test_plane_through_camera_centre(self):
        rng = np.random.default_rng(12)
        xz = rng.uniform([-2.0, 3.0], [2.0, 8.0], size=(40, 2))
        points = np.column_stack([xz[:, 0], np.zeros(40), xz[:, 1]])
        pixels, _ = project(Pose.identity(), points, default_intrinsics())
        with self.assertRaises(GeometryError):
            pnp_resection(points, pixels, default_intrinsics(), min_inliers=10)


class TestEpipolar(unittest.TestCase):

    def test_correspondence_on_epiline(self):
        rng = np.random.default_rng(8)
        intrinsics = default_intrinsics()
        pose_a, pose_b, points = two_view_scene(rng, n_points=30)
        fundamental = fundamental_from_poses(pose_a, pose_b, intrinsics)
        pixels_a, _ = project(pose_a, points, intrinsics)
        pixels_b, _ = project(pose_b, points, intrinsics)
        for x_a, x_b in zip(pixels_a, pixels_b):
            line = epiline(fundamental, x_a)
            self.assertLess(abs(line @ np.array([x_b[0], x_b[1], 1.0])), 1e-6)
            line_a = epiline(fundamental, x_b, transpose=True)
            self.assertLess(abs(line_a @ np.array([x_a[0], x_a[1], 1.0])), 1e-6)

    def test_estimated_fundamental_consistent(self):
        rng = np.random.default_rng(9)
        intrinsics = default_intrinsics()
        pose_a, pose_b, points = two_view_scene(rng, n_points=60)
        pixels_a, _ = project(pose_a, points, intrinsics)
        pixels_b, _ = project(pose_b, points, intrinsics)
        fundamental, mask = fundamental_ransac(pixels_a, pixels_b, inlier_tol=0.5)
        self.assertGreater(np.count_nonzero(mask), 55)
        for x_a, x_b in zip(pixels_a[mask], pixels_b[mask]):
            self.assertLess(abs(epiline(fundamental, x_a) @ np.array([x_b[0], x_b[1], 1.0])), 0.5)

    def test_fundamental_needs_eight(self):
        with self.assertRaises(GeometryError):
            fundamental_ransac(np.zeros((7, 2)), np.zeros((7, 2)))


if __name__ == "__main__":
    unittest.main()
