#!/usr/bin/env python3

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import thin

logger = logging.getLogger(__name__)

"""
Edge masks are boolean arrays of shape (height, width); True marks an edge pixel.
Chains hold (x, y) pixel coordinates in walk order.
"""

GAUSSIAN_TRUNCATE = 4.0
ZERO_RESPONSE = 1e-9

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
NEIGHBOUR_KERNEL = np.array([[1, 1, 1],
                             [1, 0, 1],
                             [1, 1, 1]], dtype=np.int32)

# Ring offsets (dy, dx) keyed by compass name
OFFSETS = {"N": (-1, 0), "NE": (-1, 1), "E": (0, 1), "SE": (1, 1),
           "S": (1, 0), "SW": (1, -1), "W": (0, -1), "NW": (-1, -1)}

# (present orthogonal pair, absent opposite side)
STAIRCASE_CORNERS = [(("N", "E"), ("S", "SW", "W")),
                     (("E", "S"), ("W", "NW", "N")),
                     (("S", "W"), ("N", "NE", "E")),
                     (("W", "N"), ("E", "SE", "S"))]


@dataclass
class EdgeChain:
    id: int
    points: np.ndarray  # (N, 2) integer x, y
    closed: bool = False

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class BlurVerdict:
    variance: float
    threshold: float
    sharp: bool


def kernel_radius(sigma):
    return int(GAUSSIAN_TRUNCATE * float(sigma) + 0.5)


def dog_edges(frame, sigma_small=1.0, sigma_large=1.6, response_threshold=6.0):
    """
    Zero-crossings of the difference-of-Gaussians response, gated on the
    gradient magnitude of the finer smoothing.
    :param frame: ImageFrame or a 2-D uint8 array
    :rtype: np.ndarray
    """
    if not 0 < sigma_small < sigma_large:
        raise ValueError("Need 0 < sigma_small < sigma_large, got %s, %s" % (sigma_small, sigma_large))

    pixels = getattr(frame, "pixels", frame)
    height, width = pixels.shape
    mask = np.zeros((height, width), dtype=bool)

    support = 2 * kernel_radius(sigma_large) + 1
    if height < support or width < support:
        logger.warning("Image of %dx%d is smaller than the %d px DoG support, no edges" % (width, height, support))
        return mask

    # DoG removes the DC component; centring keeps brightness shifts exact in floating point
    image = pixels.astype(np.float64)
    image -= image.mean()
    smooth_small = ndimage.gaussian_filter(image, sigma_small, truncate=GAUSSIAN_TRUNCATE)
    smooth_large = ndimage.gaussian_filter(image, sigma_large, truncate=GAUSSIAN_TRUNCATE)
    response = smooth_small - smooth_large
    response[np.abs(response) < ZERO_RESPONSE] = 0.0

    grad_y, grad_x = np.gradient(smooth_small)
    strong = np.hypot(grad_x, grad_y) > response_threshold

    magnitude = np.abs(response)

    # Horizontal neighbour pairs
    crossing = response[:, :-1] * response[:, 1:] < 0
    left_wins = magnitude[:, :-1] <= magnitude[:, 1:]
    mask[:, :-1] |= crossing & left_wins
    mask[:, 1:] |= crossing & ~left_wins

    # Vertical neighbour pairs
    crossing = response[:-1, :] * response[1:, :] < 0
    top_wins = magnitude[:-1, :] <= magnitude[1:, :]
    mask[:-1, :] |= crossing & top_wins
    mask[1:, :] |= crossing & ~top_wins

    return mask & strong


def _shifted(mask, dy, dx):
    # neighbour at (y + dy, x + dx), False outside the image
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    height, width = mask.shape
    return padded[1 + dy:1 + dy + height, 1 + dx:1 + dx + width]


def _prune_staircases(mask):
    mask = mask.copy()
    for present, absent in STAIRCASE_CORNERS:
        keep_corner = np.ones_like(mask)
        for name in present:
            keep_corner &= _shifted(mask, *OFFSETS[name])
        for name in absent:
            keep_corner &= ~_shifted(mask, *OFFSETS[name])
        mask &= ~keep_corner
    return mask


def thin_edges(mask, max_rounds=10):
    """
    Morphological thinning to single-pixel width, then removal of staircase corner
    pixels whose orthogonal neighbours already touch diagonally.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()

    thinned = mask
    for _ in range(max_rounds):
        updated = _prune_staircases(thin(thinned))
        if np.array_equal(updated, thinned):
            break
        thinned = updated
    return thinned


def neighbour_count(mask):
    return ndimage.convolve(mask.astype(np.int32), NEIGHBOUR_KERNEL, mode="constant", cval=0)


def _walk(start, members, visited):
    # Follow the unique unvisited neighbour until none is left
    path = [start]
    visited.add(start)
    y, x = start
    while True:
        step = None
        for dy, dx in OFFSETS.values():
            candidate = (y + dy, x + dx)
            if candidate in members and candidate not in visited:
                # Prefer orthogonal steps
                if step is None or abs(dy) + abs(dx) == 1:
                    step = candidate
                if abs(dy) + abs(dx) == 1:
                    break
        if step is None:
            return path
        visited.add(step)
        path.append(step)
        y, x = step


def link_edges(mask, min_len=8, return_discarded=False):
    """
    Split a thinned mask into ordered chains. Junction pixels (three or more
    edge neighbours) break chains; chains shorter than min_len are dropped.
    :return: list of EdgeChain (and the discarded pixel count when requested)
    """
    mask = np.asarray(mask, dtype=bool)
    junctions = mask & (neighbour_count(mask) >= 3)
    linkable = mask & ~junctions

    labels, _ = ndimage.label(linkable, structure=EIGHT_CONNECTED)
    chains = []
    discarded = int(np.count_nonzero(junctions))

    for label_id, window in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[window] == label_id)
        members = set(zip((ys + window[0].start).tolist(), (xs + window[1].start).tolist()))
        counts = {pixel: sum((pixel[0] + dy, pixel[1] + dx) in members for dy, dx in OFFSETS.values())
                  for pixel in members}
        visited = set()
        while len(visited) < len(members):
            remaining = sorted(pixel for pixel in members if pixel not in visited)
            endpoints = [pixel for pixel in remaining if counts[pixel] <= 1]
            closed = not endpoints
            start = endpoints[0] if endpoints else remaining[0]
            path = _walk(start, members, visited)
            if len(path) < min_len:
                discarded += len(path)
                continue
            closed = closed and len(path) > 2 and max(abs(path[0][0] - path[-1][0]),
                                                      abs(path[0][1] - path[-1][1])) == 1
            points = np.array([(x, y) for y, x in path], dtype=np.int64)
            chains.append(EdgeChain(id=len(chains), points=points, closed=closed))

    if return_discarded:
        return chains, discarded
    return chains


def blur_verdict(frame, mask, history, fraction=0.5, bootstrap=3):
    """
    Variance of the gray levels under the edge mask against an adaptive threshold.
    :param history: variances of recently accepted frames (caller-owned, not mutated)
    """
    pixels = getattr(frame, "pixels", frame)
    mask = np.asarray(mask, dtype=bool)
    history = list(history)

    if len(history) < bootstrap:
        threshold = 0.0
    else:
        threshold = fraction * float(np.median(history))

    if not mask.any():
        return BlurVerdict(variance=0.0, threshold=threshold, sharp=False)

    variance = float(np.var(pixels[mask].astype(np.float64)))
    return BlurVerdict(variance=variance, threshold=threshold, sharp=variance >= threshold)


def detect_edges(frame, config):
    """Thinned DoG mask and linked chains for one frame."""
    mask = dog_edges(frame,
                     sigma_small=config["dog.sigma_small"],
                     sigma_large=config["dog.sigma_large"],
                     response_threshold=config["dog.threshold"])
    mask = thin_edges(mask)
    chains = link_edges(mask, min_len=config["edges.min_chain_len"])
    logger.debug("%d edge pixels, %d chains" % (np.count_nonzero(mask), len(chains)))
    return mask, chains
