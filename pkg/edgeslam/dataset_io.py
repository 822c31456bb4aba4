#!/usr/bin/env python3

import logging
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

"""
TUM RGB-D monocular input and trajectory/point-cloud output.

Index file (rgb.txt):
    # timestamp filename
    1305031102.175304 rgb/1305031102.175304.png
Ground truth / trajectory:
    timestamp tx ty tz qx qy qz qw
Calibration:
    fx fy cx cy [r]
"""

INDEX_FILE_NAMES = ("rgb.txt", "index.txt")
TRAJECTORY_HEADER = "# timestamp tx ty tz qx qy qz qw"


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class ImageFrame:
    index: int
    timestamp: float
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise DatasetError("Frame %d is not an 8-bit grayscale image" % self.index)
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise DatasetError("Frame %d is empty" % self.index)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    r: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DatasetError("Focal lengths must be positive, got fx=%s fy=%s" % (self.fx, self.fy))

    def validate_image_size(self, width, height):
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise DatasetError("Principal point (%s, %s) outside a %dx%d image" % (self.cx, self.cy, width, height))

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def dist_coeffs(self):
        # Single radial coefficient, OpenCV's k1
        return np.array([self.r, 0.0, 0.0, 0.0])

    @property
    def focal(self):
        return 0.5 * (self.fx + self.fy)

    def normalize(self, pixels):
        """Pixel coordinates (N,2) -> undistorted normalized image coordinates (N,2)."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        if len(pixels) == 0:
            return np.zeros((0, 2))
        if self.r == 0.0:
            return np.column_stack([(pixels[:, 0] - self.cx) / self.fx,
                                    (pixels[:, 1] - self.cy) / self.fy])
        undistorted = cv2.undistortPoints(pixels.reshape(-1, 1, 2), self.matrix, self.dist_coeffs)
        return undistorted.reshape(-1, 2)

    def denormalize(self, normalized):
        normalized = np.asarray(normalized, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([normalized[:, 0] * self.fx + self.cx,
                                normalized[:, 1] * self.fy + self.cy])


@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: float
    position: np.ndarray
    orientation: np.ndarray  # qx, qy, qz, qw

    def __post_init__(self):
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > 1e-9:
            raise DatasetError("Quaternion norm %r is not unit" % norm)


def _read_image(image_path):
    # Colour inputs are converted with BT.601 luma (OpenCV's BGR2GRAY weights)
    pixels = cv2.imread(image_path, cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise DatasetError("Could not read image %s" % image_path)
    if pixels.dtype == np.uint16:
        pixels = (pixels // 257).astype(np.uint8)
    if pixels.ndim == 3:
        if pixels.shape[2] == 4:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_BGRA2GRAY)
        else:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_BGR2GRAY)
    return pixels


def find_index_file(sequence_dir):
    for index_name in INDEX_FILE_NAMES:
        index_file = os.path.join(sequence_dir, index_name)
        if os.path.isfile(index_file):
            return index_file
    raise DatasetError("No index file (%s) in %s" % (", ".join(INDEX_FILE_NAMES), sequence_dir))


def read_tum_index(sequence_dir):
    """
    :rtype: pd.DataFrame
    :param sequence_dir: directory holding rgb.txt and the images it lists
    """
    index_file = find_index_file(sequence_dir)
    rows = []
    with open(index_file) as index_h:
        for line_number, line in enumerate(index_h, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) < 2:
                raise DatasetError("%s:%d: expected 'timestamp path'" % (index_file, line_number))
            try:
                timestamp = float(fields[0])
            except ValueError:
                raise DatasetError("%s:%d: bad timestamp %r" % (index_file, line_number, fields[0]))
            if rows and timestamp <= rows[-1][0]:
                raise DatasetError("%s:%d: non-monotonic timestamps" % (index_file, line_number))
            rows.append((timestamp, os.path.join(sequence_dir, fields[1])))

    index = pd.DataFrame(rows, columns=["timestamp", "path"])
    logger.info("Found %d frames in %s" % (index.shape[0], index_file))
    return index


def iter_tum_frames(index):
    """Decode frames one at a time, in index order."""
    for frame_index, row in enumerate(index.itertuples()):
        yield ImageFrame(index=frame_index, timestamp=row.timestamp, pixels=_read_image(row.path))


def load_tum_sequence(sequence_dir):
    return list(iter_tum_frames(read_tum_index(sequence_dir)))


def load_calibration(calib_file):
    with open(calib_file) as calib_h:
        for line_number, line in enumerate(calib_h, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (4, 5):
                raise DatasetError("%s:%d: expected 'fx fy cx cy [r]'" % (calib_file, line_number))
            try:
                values = [float(value) for value in fields]
            except ValueError:
                raise DatasetError("%s:%d: non-numeric calibration" % (calib_file, line_number))
            return CameraIntrinsics(*values)
    raise DatasetError("No calibration line in %s" % calib_file)


def load_groundtruth(groundtruth_file):
    records = []
    with open(groundtruth_file) as gt_h:
        for line_number, line in enumerate(gt_h, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            if len(fields) != 8:
                raise DatasetError("%s:%d: expected 8 fields, got %d" % (groundtruth_file, line_number, len(fields)))
            try:
                values = np.array([float(value) for value in fields])
            except ValueError:
                raise DatasetError("%s:%d: non-numeric field" % (groundtruth_file, line_number))
            quaternion = values[4:8]
            norm = np.linalg.norm(quaternion)
            if not np.isfinite(norm) or norm < 1e-12:
                raise DatasetError("%s:%d: zero-norm quaternion" % (groundtruth_file, line_number))
            records.append(TrajectoryRecord(timestamp=values[0],
                                            position=values[1:4],
                                            orientation=quaternion / norm))

    records.sort(key=lambda record: record.timestamp)
    return records


def write_trajectory_tum(records, path):
    with open(path, "w") as output_handle:
        output_handle.write(TRAJECTORY_HEADER + "\n")
        for record in records:
            output_handle.write(" ".join(["%.9f" % record.timestamp] +
                                         ["%.9f" % value for value in record.position] +
                                         ["%.9f" % value for value in record.orientation]) + "\n")
    logger.info("Wrote %d poses to %s" % (len(records), path))


def write_pointcloud_ply(points, path):
    """
    Write an ASCII PLY point cloud.
    :return: the number of skipped (non-finite) points
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    finite = np.all(np.isfinite(points), axis=1)
    skipped = int(np.count_nonzero(~finite))
    if skipped:
        logger.warning("Skipping %d non-finite points in %s" % (skipped, path))
    kept = points[finite]

    with open(path, "w") as output_handle:
        output_handle.write("ply\n")
        output_handle.write("format ascii 1.0\n")
        output_handle.write("element vertex %d\n" % len(kept))
        output_handle.write("property float x\n")
        output_handle.write("property float y\n")
        output_handle.write("property float z\n")
        output_handle.write("end_header\n")
        output_handle.writelines("%.6f %.6f %.6f\n" % tuple(point) for point in kept)
    return skipped


def pose_to_record(timestamp, rotation, center):
    """World->camera rotation and camera centre -> camera-to-world TUM record."""
    quaternion = Rotation.from_matrix(np.asarray(rotation).T).as_quat()
    quaternion = quaternion / np.linalg.norm(quaternion)
    return TrajectoryRecord(timestamp=float(timestamp),
                            position=np.asarray(center, dtype=np.float64).copy(),
                            orientation=quaternion)


def records_from_keyframes(keyframes):
    return [pose_to_record(keyframe.timestamp, keyframe.pose.rotation, keyframe.pose.center)
            for keyframe in sorted(keyframes, key=lambda keyframe: keyframe.timestamp)]


def record_positions(records):
    if len(records) == 0:
        return np.zeros((0, 3))
    return np.array([record.position for record in records])


def record_timestamps(records):
    return np.array([record.timestamp for record in records], dtype=np.float64)
