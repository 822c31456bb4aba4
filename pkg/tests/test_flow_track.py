import unittest

import cv2
import numpy as np
from scipy import ndimage

from edgeslam.config import merge_config
from edgeslam.dataset_io import ImageFrame
from edgeslam.edge_detect import EdgeChain
from edgeslam.flow_track import (EdgeTracker, FlowParams, FlowResult, PointTrack, TrackTable, TrackedFrame,
                                 advance_tracks, bidirectional_filter, dedup_points, fundamental_rank,
                                 pyramidal_lk, seed_tracks, snap_filter, three_view_filter)
from edgeslam.mvg_core import Pose, fundamental_from_poses, project
from edgeslam.synthetic import circular_trajectory, default_intrinsics, noisy_render, points_in_front, rotation_about


def texture(seed=0, size=128):
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), 2.5)
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    return (20 + 200 * noise).astype(np.uint8)


def frame_at(step, pixels):
    return TrackedFrame(step=step, frame_index=step, timestamp=float(step), width=pixels.shape[1],
                        height=pixels.shape[0], pixels=pixels, mask=np.ones(pixels.shape, dtype=bool))


class TestPointTrack(unittest.TestCase):

    def test_positions_must_be_consecutive(self):
        track = PointTrack(track_id=0)
        track.add(3, (1.0, 2.0))
        track.add(4, (1.5, 2.0))
        with self.assertRaises(ValueError):
            track.add(6, (2.0, 2.0))
        self.assertEqual((track.birth_frame, track.last_frame), (3, 4))

    def test_dead_track_cannot_grow(self):
        track = PointTrack(track_id=0)
        track.add(0, (1.0, 2.0))
        track.kill()
        with self.assertRaises(ValueError):
            track.add(1, (1.0, 2.0))

    def test_rejection_hides_later_positions(self):
        track = PointTrack(track_id=0)
        for step in range(4):
            track.add(step, (step, 0.0))
        track.reject(2)
        self.assertFalse(track.is_live)
        self.assertIsNotNone(track.position(1))
        self.assertIsNone(track.position(2))
        self.assertIsNone(track.position(3))


class TestTrackTable(unittest.TestCase):

    def test_common_ids_skip_rejected_steps(self):
        table = TrackTable()
        first = table.spawn(0, (1.0, 1.0))
        second = table.spawn(0, (5.0, 5.0))
        for track in (first, second):
            track.add(1, track.positions[0] + 1.0)
        second.reject(1)
        self.assertEqual(table.common_ids(0), [0, 1])
        self.assertEqual(table.common_ids(0, 1), [0])
        self.assertEqual(table.live_ids(), [0])

    def test_positions_in_id_order(self):
        table = TrackTable()
        table.spawn(2, (1.0, 1.0))
        table.spawn(2, (3.0, 4.0))
        np.testing.assert_array_equal(table.positions([1, 0], 2), [[3.0, 4.0], [1.0, 1.0]])
        self.assertEqual(table.positions([], 2).shape, (0, 2))


class TestFilters(unittest.TestCase):

    def test_dedup_keeps_first_in_scan_order(self):
        points = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
        np.testing.assert_array_equal(dedup_points(points, min_dist=2.0), [0, 2])
        np.testing.assert_array_equal(dedup_points(points, min_dist=2.0, order=[1, 0, 2]), [1, 2])

    def test_dedup_survivors_are_spread(self):
        rng = np.random.default_rng(1)
        points = rng.uniform(0, 50, size=(500, 2))
        kept = points[dedup_points(points, min_dist=3.0)]
        distances = np.linalg.norm(kept[:, None] - kept[None], axis=2)
        distances[np.diag_indices(len(kept))] = np.inf
        self.assertGreaterEqual(distances.min(), 3.0)

    def test_snap_within_chebyshev_radius(self):
        mask = np.zeros((30, 30), dtype=bool)
        mask[10, 10] = True
        points = np.array([[11.5, 10.0], [13.5, 10.0], [10.0, 12.0], [np.nan, 10.0]])
        np.testing.assert_array_equal(snap_filter(points, mask, radius=2), [0, 2])

    def test_snap_on_empty_mask(self):
        self.assertEqual(len(snap_filter(np.array([[1.0, 1.0]]), np.zeros((5, 5), dtype=bool))), 0)

    def test_bidirectional(self):
        original = np.array([[10.0, 10.0], [20.0, 20.0], [30.0, 30.0]])
        forward = FlowResult(original + 3.0, np.array([True, True, False]))
        backward = FlowResult(original + np.array([[0.2, 0.0], [2.0, 0.0], [0.0, 0.0]]), np.ones(3, dtype=bool))
        np.testing.assert_array_equal(bidirectional_filter(original, forward, backward, tol=1.0), [0])

    def test_flow_params_validated(self):
        with self.assertRaises(ValueError):
            FlowParams(window=20)
        with self.assertRaises(ValueError):
            FlowParams(pyramid_levels=0)


class TestPyramidalLK(unittest.TestCase):

    def test_recovers_integer_shift(self):
        image = texture()
        shifted = np.roll(image, (2, 3), axis=(0, 1))
        points = np.array([[x, y] for x in range(40, 90, 10) for y in range(40, 90, 10)], dtype=np.float64)
        result = pyramidal_lk(image, shifted, points)
        self.assertTrue(result.converged.all())
        np.testing.assert_allclose(result.points, points + [3.0, 2.0], atol=0.1)

    def test_points_near_border_not_converged(self):
        image = texture()
        result = pyramidal_lk(image, image, np.array([[2.0, 2.0], [64.0, 64.0]]))
        np.testing.assert_array_equal(result.converged, [False, True])

    def test_size_mismatch(self):
        with self.assertRaises(ValueError):
            pyramidal_lk(np.zeros((10, 10), np.uint8), np.zeros((10, 12), np.uint8), np.zeros((1, 2)))


class TestThreeViewFilter(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(2)
        self.intrinsics = default_intrinsics()
        self.pose_a = Pose.identity()
        self.pose_b = Pose.from_rt(rotation_about((0, 1, 0), 3.0), np.array([-0.3, 0.05, 0.0]))
        self.pose_c = Pose.from_rt(rotation_about((1, 0, 0), 2.0), np.array([0.05, -0.3, 0.02]))
        points = points_in_front(rng, self.pose_a, 40)
        self.pos_a, _ = project(self.pose_a, points, self.intrinsics)
        self.pos_b, _ = project(self.pose_b, points, self.intrinsics)
        self.pos_c, _ = project(self.pose_c, points, self.intrinsics)
        self.f_ab = fundamental_from_poses(self.pose_a, self.pose_b, self.intrinsics)
        self.f_cb = fundamental_from_poses(self.pose_c, self.pose_b, self.intrinsics)

    def test_consistent_tracks_kept(self):
        keep = three_view_filter(self.pos_a, self.pos_b, self.pos_c, self.f_ab, self.f_cb, tol=1.0)
        self.assertTrue(keep.all())

    def test_displaced_middle_point_rejected(self):
        pos_b = self.pos_b.copy()
        pos_b[:10] += 5.0
        keep = three_view_filter(self.pos_a, pos_b, self.pos_c, self.f_ab, self.f_cb, tol=1.0)
        self.assertFalse(keep[:10].any())
        self.assertTrue(keep[10:].all())

    def test_rank_deficient_fundamental_skips(self):
        with self.assertLogs("edgeslam.flow_track", level="WARNING"):
            keep = three_view_filter(self.pos_a, self.pos_b + 50.0, self.pos_c, np.eye(3), self.f_cb)
        self.assertTrue(keep.all())
        self.assertEqual(fundamental_rank(self.f_ab), 2)

    def test_collinear_centres_skip_intersection_only(self):
        pose_c = Pose(rotation_about((1, 0, 0), 2.0), 2.0 * self.pose_b.center)
        points = points_in_front(np.random.default_rng(3), self.pose_a, 20)
        pos_a, _ = project(self.pose_a, points, self.intrinsics)
        pos_b, _ = project(self.pose_b, points, self.intrinsics)
        pos_c, _ = project(pose_c, points, self.intrinsics)
        f_cb = fundamental_from_poses(pose_c, self.pose_b, self.intrinsics)

        lines = np.column_stack([pos_a, np.ones(len(pos_a))]) @ self.f_ab.T
        along = np.column_stack([lines[:, 1], -lines[:, 0]]) / np.hypot(lines[:, 0], lines[:, 1])[:, None]
        pos_b = pos_b.copy()
        pos_b[:5] += 10.0 * along[:5]
        pos_b[5:10] += 5.0 * along[5:10][:, ::-1] * [1.0, -1.0]
        keep = three_view_filter(pos_a, pos_b, pos_c, self.f_ab, f_cb, tol=1.0)
        self.assertTrue(keep[:5].all())
        self.assertFalse(keep[5:10].any())
        self.assertTrue(keep[10:].all())


class TestSeedAndAdvance(unittest.TestCase):

    def test_seed_along_chain_respects_existing_tracks(self):
        table = TrackTable()
        table.spawn(0, (0.5, 10.0))
        chain = EdgeChain(id=7, points=np.array([[x, 10.0] for x in range(20)]))
        spawned = seed_tracks(table, [chain], 0, keyframe_id=3, min_dist=2.0, spacing=4)
        self.assertEqual(len(spawned), 4)
        self.assertEqual([table[track_id].chain_pos for track_id in spawned], [4, 8, 12, 16])
        self.assertTrue(all(table[track_id].birth_keyframe == 3 for track_id in spawned))

    def test_advance_follows_shift_and_drops_duplicates(self):
        image = texture(seed=3)
        shifted = np.roll(image, (1, 2), axis=(0, 1))
        table = TrackTable()
        for x in range(40, 90, 10):
            table.spawn(0, (x, 60.0))
        table.spawn(0, (40.5, 60.0))
        stats = advance_tracks(table, frame_at(0, image), frame_at(1, shifted), np.ones(image.shape, dtype=bool))
        self.assertEqual(stats.tracked, 6)
        self.assertEqual(stats.after_dedup, 5)
        self.assertEqual(table.live_ids(1), [0, 1, 2, 3, 4])
        self.assertFalse(table[5].is_live)
        np.testing.assert_allclose(table.positions([0, 1, 2, 3, 4], 1),
                                   table.positions([0, 1, 2, 3, 4], 0) + [2.0, 1.0], atol=0.1)
        self.assertAlmostEqual(stats.mean_displacement, np.hypot(2.0, 1.0), delta=0.1)

    def test_tracks_off_edges_die(self):
        image = texture(seed=4)
        table = TrackTable()
        table.spawn(0, (64.0, 64.0))
        advance_tracks(table, frame_at(0, image), frame_at(1, image), np.zeros(image.shape, dtype=bool))
        self.assertFalse(table[0].is_live)

    def test_carried_tracks_yield_to_older_residents(self):
        image = texture(seed=5)
        table = TrackTable()
        resident = table.spawn(1, (40.5, 40.0))
        near = table.spawn(0, (40.0, 40.0))
        far = table.spawn(0, (80.0, 80.0))
        stats = advance_tracks(table, frame_at(0, image), frame_at(1, image), np.ones(image.shape, dtype=bool),
                               track_ids=[near.track_id, far.track_id])
        self.assertEqual(stats.after_dedup, 1)
        self.assertTrue(resident.is_live)
        self.assertFalse(near.is_live)
        self.assertTrue(far.is_live)
        self.assertEqual(table.live_ids(1), [resident.track_id, far.track_id])

    def test_younger_resident_yields_to_carried_track(self):
        image = texture(seed=5)
        table = TrackTable()
        carried = table.spawn(0, (40.0, 40.0))
        resident = table.spawn(1, (40.5, 40.0))
        advance_tracks(table, frame_at(0, image), frame_at(1, image), np.ones(image.shape, dtype=bool),
                       track_ids=[carried.track_id])
        self.assertTrue(carried.is_live)
        self.assertFalse(resident.is_live)
        self.assertEqual(table.live_ids(1), [carried.track_id])


class TestEdgeTracker(unittest.TestCase):

    def test_blurred_frame_skipped_without_breaking_tracks(self):
        config = merge_config()
        intrinsics = default_intrinsics()
        poses = circular_trajectory(360)
        rng = np.random.default_rng(5)
        images = [noisy_render(pose, intrinsics, rng) for pose in poses[:5]]
        images[3] = cv2.GaussianBlur(images[3], (0, 0), 20)

        tracker = EdgeTracker(config)
        accepted = []
        for index, image in enumerate(images):
            tracked = tracker.track(ImageFrame(index=index, timestamp=0.1 * index, pixels=image))
            if tracked is None:
                continue
            if tracked.step == 0:
                self.assertGreater(len(tracker.seed(tracked, keyframe_id=0)), 0)
            accepted.append(tracked)

        self.assertEqual(tracker.rejected_blurred, 1)
        self.assertEqual([frame.frame_index for frame in accepted], [0, 1, 2, 4])
        self.assertEqual([frame.step for frame in accepted], [0, 1, 2, 3])
        self.assertGreater(len(tracker.table.common_ids(0, 3)), 0)

    def test_seeding_previous_frame_carries_tracks(self):
        config = merge_config()
        intrinsics = default_intrinsics()
        poses = circular_trajectory(360)
        rng = np.random.default_rng(6)
        tracker = EdgeTracker(config)
        frames = [tracker.track(ImageFrame(index=index, timestamp=0.1 * index,
                                           pixels=noisy_render(poses[index], intrinsics, rng)))
                  for index in range(2)]
        new_ids = tracker.seed(frames[0])
        carried = [track_id for track_id in new_ids if tracker.table[track_id].position(1) is not None]
        self.assertGreater(len(carried), 0.5 * len(new_ids))


if __name__ == "__main__":
    unittest.main()
