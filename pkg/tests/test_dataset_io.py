import os
import tempfile
import unittest
from types import SimpleNamespace

import cv2
import numpy as np
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from edgeslam.dataset_io import (CameraIntrinsics, DatasetError, ImageFrame, TrajectoryRecord,
                                 load_calibration, load_groundtruth, load_tum_sequence,
                                 read_tum_index, records_from_keyframes, write_pointcloud_ply,
                                 write_trajectory_tum)


def write_text(path, text):
    with open(path, "w") as handle:
        handle.write(text)


class TestSequenceLoading(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.seq_dir = self.tmp.name
        os.mkdir(os.path.join(self.seq_dir, "rgb"))

    def tearDown(self):
        self.tmp.cleanup()

    def write_image(self, name, image):
        cv2.imwrite(os.path.join(self.seq_dir, "rgb", name), image)

    def test_index_line_gives_timestamp(self):
        self.write_image("1305031102.175.png", np.full((12, 16), 90, dtype=np.uint8))
        write_text(os.path.join(self.seq_dir, "rgb.txt"),
                   "# timestamp filename\n1305031102.175 rgb/1305031102.175.png\n")
        frames = load_tum_sequence(self.seq_dir)
        self.assertEqual(len(frames), 1)
        self.assertEqual(frames[0].index, 0)
        self.assertAlmostEqual(frames[0].timestamp, 1305031102.175)
        self.assertEqual((frames[0].width, frames[0].height), (16, 12))

    def test_empty_index_is_empty_sequence(self):
        write_text(os.path.join(self.seq_dir, "rgb.txt"), "# nothing here\n")
        self.assertEqual(load_tum_sequence(self.seq_dir), [])

    def test_equal_timestamps_rejected(self):
        write_text(os.path.join(self.seq_dir, "rgb.txt"), "1.0 rgb/a.png\n1.0 rgb/b.png\n")
        with self.assertRaisesRegex(DatasetError, "non-monotonic timestamps"):
            read_tum_index(self.seq_dir)

    def test_missing_index_rejected(self):
        with self.assertRaises(DatasetError):
            load_tum_sequence(self.seq_dir)

    def test_unreadable_image_rejected(self):
        write_text(os.path.join(self.seq_dir, "rgb.txt"), "1.0 rgb/missing.png\n")
        with self.assertRaises(DatasetError):
            load_tum_sequence(self.seq_dir)

    def test_colour_image_converted_by_luma(self):
        colour = np.zeros((8, 8, 3), dtype=np.uint8)
        colour[..., 1] = 200  # pure green in BGR
        self.write_image("0.png", colour)
        write_text(os.path.join(self.seq_dir, "rgb.txt"), "0.5 rgb/0.png\n")
        frame = load_tum_sequence(self.seq_dir)[0]
        self.assertEqual(frame.pixels.dtype, np.uint8)
        self.assertEqual(frame.pixels.ndim, 2)
        # BT.601 green weight 0.587
        self.assertAlmostEqual(int(frame.pixels[0, 0]), round(0.587 * 200), delta=1)

    def test_loading_is_deterministic(self):
        rng = np.random.default_rng(3)
        for i in range(3):
            self.write_image("%d.png" % i, rng.integers(0, 255, (10, 10), dtype=np.uint8))
        write_text(os.path.join(self.seq_dir, "rgb.txt"),
                   "".join("%d.0 rgb/%d.png\n" % (i, i) for i in range(3)))
        first = load_tum_sequence(self.seq_dir)
        second = load_tum_sequence(self.seq_dir)
        for a, b in zip(first, second):
            self.assertEqual(a.timestamp, b.timestamp)
            np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_frame_rejects_empty_image(self):
        with self.assertRaises(DatasetError):
            ImageFrame(index=0, timestamp=0.0, pixels=np.zeros((0, 4), dtype=np.uint8))


class TestGroundTruth(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "groundtruth.txt")

    def tearDown(self):
        self.tmp.cleanup()

    def test_comment_skipped_and_record_parsed(self):
        write_text(self.path, "# comment\n0.0 1 2 3 0 0 0 1\n")
        records = load_groundtruth(self.path)
        self.assertEqual(len(records), 1)
        assert_allclose(records[0].position, [1, 2, 3])
        assert_allclose(records[0].orientation, [0, 0, 0, 1])

    def test_quaternion_normalized_on_load(self):
        write_text(self.path, "0.0 0 0 0 0 0 0 2\n")
        assert_allclose(load_groundtruth(self.path)[0].orientation, [0, 0, 0, 1])

    def test_zero_quaternion_rejected(self):
        write_text(self.path, "0.0 1 2 3 0 0 0 0\n")
        with self.assertRaises(DatasetError):
            load_groundtruth(self.path)

    def test_malformed_line_reports_line_number(self):
        write_text(self.path, "# header\n0.0 1 2 3 0 0 0 1\n1.0 1 2\n")
        with self.assertRaisesRegex(DatasetError, ":3:"):
            load_groundtruth(self.path)

    def test_records_sorted(self):
        write_text(self.path, "2.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 0 1\n")
        self.assertEqual([record.timestamp for record in load_groundtruth(self.path)], [1.0, 2.0])


class TestTrajectoryWriter(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "trajectory.txt")

    def tearDown(self):
        self.tmp.cleanup()

    def test_empty_list_writes_header_only(self):
        write_trajectory_tum([], self.path)
        with open(self.path) as handle:
            lines = handle.read().splitlines()
        self.assertEqual(len(lines), 1)
        self.assertTrue(lines[0].startswith("#"))

    def test_one_record_has_eight_fields(self):
        record = TrajectoryRecord(1.5, np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 0.0, 1.0]))
        write_trajectory_tum([record], self.path)
        with open(self.path) as handle:
            data_lines = [line for line in handle if not line.startswith("#")]
        self.assertEqual(len(data_lines), 1)
        self.assertEqual(len(data_lines[0].split()), 8)

    def test_random_records_read_back(self):
        rng = np.random.default_rng(11)
        quaternions = Rotation.random(100, random_state=5).as_quat()
        records = [TrajectoryRecord(float(i) + rng.random() * 0.5, rng.normal(size=3) * 10, quaternions[i])
                   for i in range(100)]
        write_trajectory_tum(records, self.path)
        loaded = load_groundtruth(self.path)
        self.assertEqual(len(loaded), 100)
        for written, read in zip(records, loaded):
            self.assertAlmostEqual(written.timestamp, read.timestamp, delta=1e-6)
            assert_allclose(read.position, written.position, atol=1e-6)
            assert_allclose(read.orientation, written.orientation, atol=1e-6)


class TestPointCloudWriter(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "map.ply")

    def tearDown(self):
        self.tmp.cleanup()

    def read_header(self):
        with open(self.path) as handle:
            return handle.read()

    def test_empty_cloud(self):
        self.assertEqual(write_pointcloud_ply([], self.path), 0)
        self.assertIn("element vertex 0", self.read_header())

    def test_three_points(self):
        write_pointcloud_ply([[0, 0, 1], [1, 0, 1], [0, 1, 1]], self.path)
        text = self.read_header()
        self.assertIn("element vertex 3", text)
        self.assertEqual(len(text.split("end_header\n")[1].splitlines()), 3)

    def test_nan_point_skipped(self):
        skipped = write_pointcloud_ply([[0, 0, 1], [np.nan, 0, 1]], self.path)
        self.assertEqual(skipped, 1)
        self.assertIn("element vertex 1", self.read_header())


class TestCalibration(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "calib.txt")

    def tearDown(self):
        self.tmp.cleanup()

    def test_four_fields_default_zero_distortion(self):
        write_text(self.path, "# fx fy cx cy\n525 525 319.5 239.5\n")
        intrinsics = load_calibration(self.path)
        self.assertEqual(intrinsics.r, 0.0)
        self.assertEqual(intrinsics.fx, 525.0)

    def test_five_fields(self):
        write_text(self.path, "500 500 320 240 0.1\n")
        self.assertEqual(load_calibration(self.path).r, 0.1)

    def test_bad_field_count(self):
        write_text(self.path, "500 500 320\n")
        with self.assertRaises(DatasetError):
            load_calibration(self.path)

    def test_non_positive_focal(self):
        with self.assertRaises(DatasetError):
            CameraIntrinsics(0.0, 500.0, 320.0, 240.0)

    def test_normalize_inverts_denormalize(self):
        intrinsics = CameraIntrinsics(500.0, 480.0, 320.0, 240.0)
        pixels = np.array([[100.0, 50.0], [320.0, 240.0], [600.0, 400.0]])
        assert_allclose(intrinsics.denormalize(intrinsics.normalize(pixels)), pixels, atol=1e-12)


class TestKeyframeRecords(unittest.TestCase):

    def test_camera_to_world_orientation(self):
        world_to_camera = Rotation.from_euler("z", 90, degrees=True).as_matrix()
        keyframes = [
            SimpleNamespace(timestamp=2.0,
                            pose=SimpleNamespace(rotation=world_to_camera, center=np.array([1.0, 0, 0]))),
            SimpleNamespace(timestamp=1.0, pose=SimpleNamespace(rotation=np.eye(3), center=np.zeros(3))),
        ]
        records = records_from_keyframes(keyframes)
        self.assertEqual([record.timestamp for record in records], [1.0, 2.0])
        assert_allclose(records[0].orientation, [0, 0, 0, 1], atol=1e-12)
        recovered = Rotation.from_quat(records[1].orientation).as_matrix()
        assert_allclose(recovered, world_to_camera.T, atol=1e-12)
        assert_allclose(records[1].position, [1, 0, 0])


if __name__ == "__main__":
    unittest.main()
