#!/usr/bin/env python3

import logging
import os
from dataclasses import dataclass
from functools import lru_cache

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from edgeslam.dataset_io import CameraIntrinsics, pose_to_record, write_trajectory_tum
from edgeslam.edge_detect import EdgeChain
from edgeslam.flow_track import TrackedFrame, TrackTable
from edgeslam.mvg_core import Pose, project

logger = logging.getLogger(__name__)

"""
Synthetic wireframe scenes: shaded, grained boxes around the origin seen from a circular
trajectory. Used both to write TUM-format test sequences and to feed the SLAM
back end with exact (optionally noisy) projections of edge samples.
"""

IMAGE_WIDTH = 640
IMAGE_HEIGHT = 480
BACKGROUND_LEVEL = 20

# Unit cube corners and its twelve edges / six faces
CUBE_CORNERS = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.float64)
CUBE_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)]
CUBE_FACES = [(0, 1, 3, 2), (4, 5, 7, 6), (0, 1, 5, 4), (2, 3, 7, 6), (0, 2, 6, 4), (1, 3, 7, 5)]

# Shade factor per face: bottom, top, the two y faces, the two x faces
FACE_SHADING = (0.42, 1.0, 0.68, 0.68, 0.42, 0.42)
PANEL_INSET = 0.25
PANEL_CONTRAST = 40.0

# Surface grain: smooth noise sampled every GRAIN_CELL metres of face
GRAIN_LEVEL = 5.0
GRAIN_CELL = 0.02
GRAIN_SIZE = 256
GRAIN_SMOOTHING = 1.5
GRAIN_SEED = 7
GRAIN_FACE_OFFSET = 9.7

# (min corner, size, gray level)
DEFAULT_BOXES = [((-1.6, -1.2, 0.0), (1.0, 0.8, 1.2), 210),
                 ((0.5, -1.5, 0.0), (0.9, 1.1, 0.7), 180),
                 ((-0.9, 0.6, 0.0), (1.3, 0.7, 0.9), 240),
                 ((0.8, 0.7, 0.0), (0.6, 0.6, 1.6), 150)]


def default_intrinsics():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=319.5, cy=239.5)


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """Camera at center looking at target; image x to the right, image y down."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.vstack([right, down, forward]), center)


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def random_pose(rng, center_scale=1.0):
    return Pose(random_rotation(rng), rng.normal(size=3) * center_scale)


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(np.radians(degrees) * axis / np.linalg.norm(axis)).as_matrix()


def points_in_front(rng, pose, n_points, depth=(4.0, 8.0), half_fov=0.5):
    """World points inside the view of pose, at depths drawn uniformly from the given range."""
    normalized = rng.uniform(-half_fov, half_fov, size=(n_points, 2))
    depths = rng.uniform(depth[0], depth[1], size=n_points)
    camera = np.column_stack([normalized, np.ones(n_points)]) * depths[:, None]
    return pose.center + camera @ pose.rotation


def box_corners(origin, size):
    return np.asarray(origin, dtype=np.float64) + CUBE_CORNERS * np.asarray(size, dtype=np.float64)


def wireframe_segments(boxes=None):
    """:return: (M, 2, 3) array of 3D box edges"""
    boxes = DEFAULT_BOXES if boxes is None else boxes
    segments = []
    for origin, size, _ in boxes:
        corners = box_corners(origin, size)
        segments.extend([corners[a], corners[b]] for a, b in CUBE_EDGES)
    return np.array(segments)


@dataclass
class EdgeSamples:
    points: np.ndarray        # (N, 3)
    segment_ids: np.ndarray   # (N,)
    orders: np.ndarray        # (N,) position along the segment


def sample_segments(segments, spacing=0.05):
    points, segment_ids, orders = [], [], []
    for segment_id, (start, end) in enumerate(segments):
        n_samples = max(2, int(np.linalg.norm(end - start) / spacing) + 1)
        for order, fraction in enumerate(np.linspace(0.0, 1.0, n_samples)):
            points.append(start + fraction * (end - start))
            segment_ids.append(segment_id)
            orders.append(order)
    return EdgeSamples(np.array(points), np.array(segment_ids), np.array(orders))


def circular_trajectory(n_poses, radius=6.0, height=1.5, target=(0.0, 0.0, 0.5), arc_deg=360.0, start_deg=0.0):
    angles = np.radians(start_deg + arc_deg * np.arange(n_poses) / n_poses)
    return [look_at((radius * np.cos(angle), radius * np.sin(angle), height), target) for angle in angles]


@lru_cache(maxsize=None)
def grain_tile(size=GRAIN_SIZE, seed=GRAIN_SEED):
    """Smooth unit-variance noise shared by every face; faces sample it at different offsets. Read-only."""
    rng = np.random.default_rng(seed)
    tile = ndimage.gaussian_filter(rng.normal(size=(size, size)), GRAIN_SMOOTHING, mode="wrap")
    return tile / tile.std()


def _coverage(pixels, width, height):
    # Anti-aliased polygon coverage in [0, 1]
    cover = np.zeros((height, width), dtype=np.uint8)
    polygon = np.round(pixels * 16).astype(np.int32).reshape(-1, 1, 2)
    cv2.fillPoly(cover, [polygon], 255, lineType=cv2.LINE_AA, shift=4)
    return cover.astype(np.float64) / 255.0


def surface_coordinates(pose, intrinsics, vertices, xs, ys):
    """
    Metric coordinates of pixels (xs, ys) on the plane of a rectangular face, along its
    first and last edge from vertices[0]. Radial distortion is ignored.
    """
    origin = vertices[0]
    axis_s = (vertices[1] - origin) / np.linalg.norm(vertices[1] - origin)
    axis_t = (vertices[3] - origin) / np.linalg.norm(vertices[3] - origin)
    homography = intrinsics.matrix @ pose.rotation @ np.column_stack([axis_s, axis_t, origin - pose.center])
    mapped = np.linalg.solve(homography, np.vstack([xs, ys, np.ones(len(xs))]))
    return (mapped[:2] / mapped[2]).T


def panel_corners(vertices, inset=PANEL_INSET):
    origin = vertices[0]
    axis_s, axis_t = vertices[1] - origin, vertices[3] - origin
    return np.array([origin + a * axis_s + b * axis_t
                     for a, b in ((inset, inset), (1 - inset, inset), (1 - inset, 1 - inset), (inset, 1 - inset))])


def _paint_face(image, pose, intrinsics, vertices, shade, grain_offset):
    height, width = image.shape
    face_cover = _coverage(project(pose, vertices, intrinsics)[0], width, height)
    ys, xs = np.nonzero(face_cover > 0)
    if len(xs) == 0:
        return
    panel_cover = _coverage(project(pose, panel_corners(vertices), intrinsics)[0], width, height)[ys, xs]
    panel_shade = shade - PANEL_CONTRAST if shade >= 128 else shade + PANEL_CONTRAST

    cells = np.mod(surface_coordinates(pose, intrinsics, vertices, xs, ys) / GRAIN_CELL + grain_offset, GRAIN_SIZE)
    grain = ndimage.map_coordinates(grain_tile(), [cells[:, 1], cells[:, 0]], order=1, mode="grid-wrap")

    value = shade + (panel_shade - shade) * panel_cover + GRAIN_LEVEL * grain
    alpha = face_cover[ys, xs]
    image[ys, xs] += alpha * (value - image[ys, xs])


def render_boxes(pose, intrinsics, width=IMAGE_WIDTH, height=IMAGE_HEIGHT, boxes=None):
    """
    Boxes drawn far to near on a uniform background. Each face carries a flat shade,
    an inset panel and a fixed grain texture attached to the surface.
    """
    boxes = DEFAULT_BOXES if boxes is None else boxes
    image = np.full((height, width), float(BACKGROUND_LEVEL))
    faces = []
    for box_index, (origin, size, level) in enumerate(boxes):
        corners = box_corners(origin, size)
        box_center = corners.mean(axis=0)
        for face_index, face in enumerate(CUBE_FACES):
            vertices = corners[list(face)]
            _, depth = project(pose, vertices, intrinsics)
            if np.any(depth <= 0.1):
                continue
            normal = vertices.mean(axis=0) - box_center
            if np.dot(normal, pose.center - vertices.mean(axis=0)) <= 0:
                continue
            grain_offset = GRAIN_FACE_OFFSET * (box_index * len(CUBE_FACES) + face_index)
            faces.append((float(depth.mean()), vertices, level * FACE_SHADING[face_index], grain_offset))

    for _, vertices, shade, grain_offset in sorted(faces, key=lambda face: -face[0]):
        _paint_face(image, pose, intrinsics, vertices, shade, grain_offset)
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def noisy_render(pose, intrinsics, rng, noise_level=2.0, width=IMAGE_WIDTH, height=IMAGE_HEIGHT, boxes=None):
    """Rendered boxes plus rounded Gaussian gray-level noise."""
    image = render_boxes(pose, intrinsics, width, height, boxes).astype(np.float64)
    if noise_level > 0:
        image += rng.normal(scale=noise_level, size=image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def write_synthetic_sequence(out_dir, n_frames=120, frame_interval=0.1, noise_level=2.0, seed=0,
                             intrinsics=None, width=IMAGE_WIDTH, height=IMAGE_HEIGHT, arc_deg=360.0):
    """
    Write rgb/*.png, rgb.txt, groundtruth.txt and calib.txt for a circular sequence
    covering arc_deg of the orbit.
    :return: list of ground-truth poses
    """
    intrinsics = intrinsics or default_intrinsics()
    rng = np.random.default_rng(seed)
    image_dir = os.path.join(out_dir, "rgb")
    os.makedirs(image_dir, exist_ok=True)
    poses = circular_trajectory(n_frames, arc_deg=arc_deg)
    records = []
    with open(os.path.join(out_dir, "rgb.txt"), "w") as index_handle:
        index_handle.write("# timestamp filename\n")
        for frame_index, pose in enumerate(poses):
            timestamp = 1.0 + frame_index * frame_interval
            image = noisy_render(pose, intrinsics, rng, noise_level, width, height)
            name = "%.6f.png" % timestamp
            cv2.imwrite(os.path.join(image_dir, name), image)
            index_handle.write("%.6f rgb/%s\n" % (timestamp, name))
            records.append(pose_to_record(timestamp, pose.rotation, pose.center))

    write_trajectory_tum(records, os.path.join(out_dir, "groundtruth.txt"))
    with open(os.path.join(out_dir, "calib.txt"), "w") as calib_handle:
        calib_handle.write("%.6f %.6f %.6f %.6f %.6f\n"
                           % (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy, intrinsics.r))
    logger.info("Wrote %d synthetic frames to %s" % (n_frames, out_dir))
    return poses


class SyntheticTracker:
    """
    Stand-in for the image tracker: track positions are projections of edge samples
    (plus optional Gaussian noise), chains are the visible samples of each segment.
    """

    def __init__(self, samples, poses, timestamps, intrinsics, width=IMAGE_WIDTH, height=IMAGE_HEIGHT,
                 noise_px=0.0, seed=0, margin=2.0):
        self.samples = samples
        self.poses = poses
        self.timestamps = timestamps
        self.intrinsics = intrinsics
        self.width = width
        self.height = height
        self.noise_px = noise_px
        self.margin = margin
        self.rng = np.random.default_rng(seed)
        self.table = TrackTable()
        self.track_of_sample = {}
        self.current = None
        self.previous = None
        self._visible = None
        self._pixels = None
        self._chain_samples = {}

    def __len__(self):
        return len(self.poses)

    def _observe(self, step):
        pixels, depth = project(self.poses[step], self.samples.points, self.intrinsics)
        if self.noise_px > 0:
            pixels = pixels + self.rng.normal(scale=self.noise_px, size=pixels.shape)
        visible = ((depth > 0.1) & (pixels[:, 0] >= self.margin) & (pixels[:, 0] <= self.width - 1 - self.margin) &
                   (pixels[:, 1] >= self.margin) & (pixels[:, 1] <= self.height - 1 - self.margin))
        return pixels, visible

    def track(self, step):
        """Advance every live track to the given step and return the frame."""
        pixels, visible = self._observe(step)
        for sample, track_id in list(self.track_of_sample.items()):
            track = self.table[track_id]
            if track.is_live and visible[sample] and track.last_frame == step - 1:
                track.add(step, pixels[sample])
            else:
                track.kill()
                del self.track_of_sample[sample]

        chains = []
        chain_samples = {}
        for segment_id in np.unique(self.samples.segment_ids):
            members = np.nonzero((self.samples.segment_ids == segment_id) & visible)[0]
            members = members[np.argsort(self.samples.orders[members])]
            if len(members) < 2:
                continue
            chains.append(EdgeChain(id=int(segment_id), points=pixels[members].copy()))
            chain_samples[int(segment_id)] = members

        frame = TrackedFrame(step=step, frame_index=step, timestamp=float(self.timestamps[step]),
                             width=self.width, height=self.height, chains=chains)
        self._chain_samples[step] = chain_samples
        self.previous, self.current = self.current, frame
        self._pixels, self._visible = pixels, visible
        return frame

    def seed(self, tracked_frame, keyframe_id=None):
        """Start tracks on every visible sample of the keyframe that is not tracked yet."""
        spawned = []
        chain_samples = self._chain_samples[tracked_frame.step]
        for chain in tracked_frame.chains:
            for chain_pos, sample in enumerate(chain_samples[chain.id]):
                if sample in self.track_of_sample:
                    continue
                track = self.table.spawn(tracked_frame.step, chain.points[chain_pos], keyframe_id=keyframe_id,
                                         chain_id=chain.id, chain_pos=chain_pos)
                self.track_of_sample[sample] = track.track_id
                spawned.append(track.track_id)
                # Catch up to the current frame when seeding the previous one
                if self.current is not None and self.current.step == tracked_frame.step + 1:
                    if self._visible[sample]:
                        track.add(self.current.step, self._pixels[sample])
                    else:
                        track.kill()
                        del self.track_of_sample[sample]
        return spawned

    def frames(self):
        for step in range(len(self.poses)):
            yield self.track(step)

    def sample_of_track(self):
        return {track_id: sample for sample, track_id in self.track_of_sample.items()}
