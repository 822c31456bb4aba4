import unittest

import cv2
import numpy as np
from scipy import ndimage

from edgeslam.config import merge_config
from edgeslam.dataset_io import pose_to_record, records_from_keyframes
from edgeslam.eval_ate import associate, ate_rmse
from edgeslam.loop_closure import (LoopCandidate, QuadrantDescriptor, compute_mmin, detect_loop,
                                   keyframe_signature, loop_correspondences, match_score, merge_loop,
                                   moment_signature, quadrant_match, validate_loop)
from edgeslam.mvg_core import Pose, Similarity, project
from edgeslam.slam_map import SlamMap
from edgeslam.synthetic import (circular_trajectory, default_intrinsics, rotation_about, sample_segments,
                                wireframe_segments)


def random_shape(rng, size=240, vertices=6):
    """Filled random polygon away from the borders."""
    mask = np.zeros((size, size), dtype=np.uint8)
    polygon = rng.uniform(0.3 * size, 0.7 * size, size=(vertices, 2)).astype(np.int32)
    cv2.fillPoly(mask, [polygon.reshape(-1, 1, 2)], 1)
    return mask.astype(bool)


def flat_descriptor(value=1.0):
    return QuadrantDescriptor(np.full(16, 3.0), np.full(16, 0.1), np.full(16, 120.0 * value))


def signature_for_score(score):
    """A signature whose score against the zero signature is `score` when descriptors agree."""
    signature = np.zeros(7)
    signature[0] = -np.log(2.0 * score - 1.0)
    return signature


def scored_map(scores, rotation_deg=0.0):
    """Keyframes 0..n-1 scoring `scores` against a final keyframe n with the zero signature."""
    slam_map = SlamMap(default_intrinsics())
    for index, score in enumerate(scores):
        slam_map.add_keyframe(index, float(index), Pose(rotation_about((0, 1, 0), rotation_deg), np.zeros(3)),
                              signature=signature_for_score(score), descriptor=flat_descriptor())
    current = slam_map.add_keyframe(len(scores), float(len(scores)), Pose.identity(), signature=np.zeros(7),
                                    descriptor=flat_descriptor())
    return slam_map, current


class TestMomentSignature(unittest.TestCase):

    def test_translation_invariance(self):
        rng = np.random.default_rng(40)
        for _ in range(100):
            mask = random_shape(rng)
            shifted = np.roll(mask, (int(rng.integers(-50, 50)), int(rng.integers(-50, 50))), axis=(0, 1))
            np.testing.assert_allclose(moment_signature(shifted), moment_signature(mask), atol=1e-9)

    def test_quarter_turn_invariance(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            mask = random_shape(rng)
            np.testing.assert_allclose(moment_signature(np.rot90(mask)), moment_signature(mask), atol=1e-3)

    def test_scale_invariance(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            mask = random_shape(rng)
            doubled = np.kron(mask, np.ones((2, 2), dtype=bool))
            np.testing.assert_allclose(moment_signature(doubled)[:4], moment_signature(mask)[:4], atol=1e-2)

    def test_empty_mask(self):
        with self.assertRaises(ValueError):
            moment_signature(np.zeros((10, 10), dtype=bool))
        self.assertEqual(keyframe_signature(np.zeros((10, 10)), np.zeros((10, 10), dtype=bool)), (None, None))


class TestQuadrantMatch(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(43)
        self.descriptor = QuadrantDescriptor(rng.integers(1, 20, size=16).astype(np.float64),
                                             rng.uniform(0.01, 0.2, size=16), rng.uniform(40, 220, size=16))

    def test_identical(self):
        self.assertEqual(quadrant_match(self.descriptor, self.descriptor), 1.0)

    def test_half_perturbed(self):
        counts, density, intensity = (self.descriptor.counts.copy(), self.descriptor.density.copy(),
                                      self.descriptor.intensity.copy())
        for values in (counts, density, intensity):
            values[::2] *= 3.0
        perturbed = QuadrantDescriptor(counts, density, intensity)
        self.assertEqual(quadrant_match(self.descriptor, perturbed), 0.5)

    def test_all_perturbed(self):
        perturbed = QuadrantDescriptor(self.descriptor.counts * 4.0, self.descriptor.density * 4.0,
                                       self.descriptor.intensity * 4.0)
        self.assertEqual(quadrant_match(self.descriptor, perturbed), 0.0)


class TestMatchScore(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(44)
        self.keyframes = []
        slam_map = SlamMap(default_intrinsics())
        for index in range(2):
            field = ndimage.gaussian_filter(rng.normal(size=(120, 160)), 3.0)
            pixels = (128 + 600 * field).clip(0, 255).astype(np.uint8)
            mask = np.abs(ndimage.laplace(field)) > 0.01
            signature, descriptor = keyframe_signature(pixels, mask)
            self.keyframes.append(slam_map.add_keyframe(index, float(index), Pose.identity(), signature=signature,
                                                        descriptor=descriptor))

    def test_self_match(self):
        self.assertAlmostEqual(match_score(self.keyframes[0], self.keyframes[0]), 1.0)

    def test_symmetric(self):
        self.assertAlmostEqual(match_score(self.keyframes[0], self.keyframes[1]),
                               match_score(self.keyframes[1], self.keyframes[0]), places=12)

    def test_score_bounds(self):
        score = match_score(self.keyframes[0], self.keyframes[1])
        self.assertGreaterEqual(score, 0.0)
        self.assertLess(score, 1.0)


class TestLoopDetection(unittest.TestCase):

    def setUp(self):
        self.config = merge_config()

    def test_mmin_from_recent_neighbours(self):
        slam_map, current = scored_map([0.55, 0.9, 0.8, 0.85, 0.7, 0.95])
        self.assertAlmostEqual(compute_mmin(slam_map, current, self.config), 0.7)

    def test_mmin_single_neighbour(self):
        slam_map, current = scored_map([0.6])
        self.assertAlmostEqual(compute_mmin(slam_map, current, self.config), 0.6)

    def test_mmin_without_aligned_neighbours(self):
        slam_map, current = scored_map([0.9, 0.8], rotation_deg=40.0)
        self.assertIsNone(compute_mmin(slam_map, current, self.config))

    def test_best_of_run(self):
        slam_map, current = scored_map([0.6, 0.8, 0.9, 0.85, 0.6])
        candidate = detect_loop(slam_map, current, 0.7, self.config)
        self.assertEqual(candidate.keyframe_id, 2)
        self.assertAlmostEqual(candidate.score, 0.9)

    def test_short_run_ignored(self):
        slam_map, current = scored_map([0.8, 0.9, 0.6, 0.95, 0.6])
        self.assertIsNone(detect_loop(slam_map, current, 0.7, self.config))

    def test_neighbour_never_candidate(self):
        slam_map, current = scored_map([0.8, 0.9, 0.85, 0.6])
        for offset in range(5):
            slam_map.add_point([offset, 0.0, 5.0], {1: (10.0, 10.0), current.id: (12.0, 10.0)})
        self.assertIsNone(detect_loop(slam_map, current, 0.7, self.config))


def drift():
    return Similarity(1.2, rotation_about((0, 0, 1), 10.0), np.array([0.5, -0.3, 0.2]))


def paired_points(slam_map, n_pairs, rng):
    """Loop-side points and their drifted current-side duplicates."""
    pairs = []
    for _ in range(n_pairs):
        position = rng.uniform(-2.0, 2.0, size=3)
        loop_point = slam_map.add_point(position)
        current_point = slam_map.add_point(drift().apply(position))
        pairs.append((current_point.id, loop_point.id))
    return pairs


class TestValidateLoop(unittest.TestCase):

    def setUp(self):
        self.config = merge_config()
        self.slam_map = SlamMap(default_intrinsics())
        self.keyframe = self.slam_map.add_keyframe(0, 0.0, Pose.identity())

    def test_similarity_recovers_drift(self):
        pairs = paired_points(self.slam_map, 150, np.random.default_rng(45))
        candidate = validate_loop(self.slam_map, self.keyframe, LoopCandidate(0, 0.9), self.config, pairs=pairs)
        self.assertEqual(candidate.inliers, 150)
        composed = candidate.similarity.compose(drift())
        self.assertAlmostEqual(composed.scale, 1.0, delta=1e-6)
        np.testing.assert_allclose(composed.rotation, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(composed.translation, np.zeros(3), atol=1e-6)

    def test_inlier_threshold(self):
        rng = np.random.default_rng(46)
        pairs = paired_points(self.slam_map, 101, rng)
        self.assertIsNotNone(validate_loop(self.slam_map, self.keyframe, LoopCandidate(0, 0.9), self.config,
                                           pairs=pairs))
        self.assertIsNone(validate_loop(self.slam_map, self.keyframe, LoopCandidate(0, 0.9), self.config,
                                        pairs=pairs[:99]))

    def test_outliers_excluded(self):
        rng = np.random.default_rng(47)
        pairs = paired_points(self.slam_map, 160, rng)
        for current_id, _ in pairs[:40]:
            self.slam_map.points[current_id].position += rng.uniform(0.5, 1.0, size=3)
        candidate = validate_loop(self.slam_map, self.keyframe, LoopCandidate(0, 0.9), self.config, pairs=pairs)
        self.assertEqual(candidate.inliers, 120)
        self.assertEqual(candidate.pairs, pairs[40:])


class TestLoopCorrespondences(unittest.TestCase):

    def test_flowed_observations_paired(self):
        rng = np.random.default_rng(48)
        field = ndimage.gaussian_filter(rng.normal(size=(128, 128)), 2.5)
        field = (field - field.min()) / (field.max() - field.min())
        image = (20 + 200 * field).astype(np.uint8)
        shifted = np.roll(image, (1, 2), axis=(0, 1))

        slam_map = SlamMap(default_intrinsics())
        loop_kf = slam_map.add_keyframe(0, 0.0, Pose.identity(), image=image)
        current_kf = slam_map.add_keyframe(1, 1.0, Pose.identity(), image=shifted)
        expected = []
        for x in range(40, 90, 10):
            for y in range(40, 90, 10):
                loop_point = slam_map.add_point([0.0, 0.0, 1.0], {loop_kf.id: (x, y)})
                current_point = slam_map.add_point([0.0, 0.0, 1.0], {current_kf.id: (x + 2.0, y + 1.0)})
                expected.append((current_point.id, loop_point.id))
        pairs = loop_correspondences(slam_map, current_kf, loop_kf, merge_config())
        self.assertEqual(sorted(pairs), sorted(expected))


def observed(slam_map, kf_ids, positions, poses):
    point_ids = []
    for position in positions:
        observations = {kf_id: project(poses[kf_id], position[None], slam_map.intrinsics)[0][0] for kf_id in kf_ids}
        point_ids.append(slam_map.add_point(position, observations).id)
    return point_ids


class TestMergeLoop(unittest.TestCase):

    def test_drifted_loop_corrected(self):
        config = merge_config()
        poses = circular_trajectory(12)
        positions = sample_segments(wireframe_segments(), spacing=0.1).points
        slam_map = SlamMap(default_intrinsics())
        for index, pose in enumerate(poses):
            slam_map.add_keyframe(index, float(index), pose)
        loop_ids = observed(slam_map, range(7), positions, poses)
        current_ids = observed(slam_map, range(7, 12), positions, poses)

        # Drift the last five keyframes together with the points only they see
        for kf_id in range(7, 12):
            slam_map.keyframes[kf_id].pose = drift().apply_to_pose(poses[kf_id])
        for point_id in current_ids:
            slam_map.points[point_id].position = drift().apply(slam_map.points[point_id].position)
        slam_map.update_covisibility()

        groundtruth = [pose_to_record(float(index), pose.rotation, pose.center) for index, pose in enumerate(poses)]

        def ate():
            return ate_rmse(associate(records_from_keyframes(slam_map.ordered_keyframes()), groundtruth)).rmse

        before = ate()
        observations_before = sum(len(point.observations) for point in slam_map.points.values())
        keyframe = slam_map.keyframes[11]
        candidate = validate_loop(slam_map, keyframe, LoopCandidate(0, 0.9), config,
                                  pairs=list(zip(current_ids, loop_ids)))
        self.assertIsNotNone(candidate)
        fused = merge_loop(slam_map, keyframe, candidate, config)

        self.assertEqual(fused, len(positions))
        self.assertEqual(len(slam_map.points), len(positions))
        self.assertEqual(sum(len(point.observations) for point in slam_map.points.values()), observations_before)
        self.assertLess(10.0 * ate(), before)
        for point_id in loop_ids:
            self.assertEqual(sorted(slam_map.points[point_id].observations), list(range(12)))


if __name__ == "__main__":
    unittest.main()
