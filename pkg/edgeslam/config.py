#!/usr/bin/env python3

import logging
import re

import yaml

logger = logging.getLogger(__name__)

"""
Flat, dotted configuration keys used throughout the pipeline.
A config file may be YAML ("dog.sigma_small: 1.2") or plain "key=value" lines.
"""

DEFAULT_CONFIG = {
    # Edge extraction
    "dog.sigma_small": 1.0,
    "dog.sigma_large": 1.6,
    "dog.threshold": 6.0,
    "edges.min_chain_len": 8,
    "blur.fraction": 0.5,
    "blur.history": 30,
    "blur.bootstrap": 3,
    # Optical flow tracking
    "flow.window": 21,
    "flow.levels": 3,
    "flow.max_iters": 30,
    "flow.eps": 0.01,
    "flow.bidir_tol": 1.0,
    "flow.min_dist": 2.0,
    "flow.snap_radius": 2,
    "flow.epiline_tol": 1.0,
    "flow.intersection_tol": 2.0,
    "flow.min_three_view": 15,
    "flow.track_spacing": 4,
    # RANSAC and geometry
    "ransac.confidence": 0.99,
    "ransac.max_iters": 1000,
    "ransac.seed": 0,
    "five.inlier_px": 1.0,
    "five.min_inliers": 50,
    "pnp.inlier_px": 2.0,
    "pnp.min_inliers": 30,
    "fund.inlier_px": 1.0,
    "tri.min_parallax_deg": 1.0,
    # Bundle adjustment
    "ba.max_iters": 50,
    "ba.max_iters_global": 100,
    "ba.initial_damping": 1e-3,
    "ba.function_tol": 1e-10,
    "ba.parameter_tol": 1e-12,
    "ba.huber_px": 2.0,
    "ba.outlier_px": 6.0,
    "ba.global_interval_kf": 25,
    "ba.global_interval_s": 25.0,
    "ba.residual_form": "standard",
    "ba.async_global": False,
    # Keyframe selection
    "kf.rot_deg": 15.0,
    "kf.track_frac": 0.30,
    "kf.min_3d2d": 250,
    "kf.disp_frac": 0.20,
    "kf.interval_s": 1.0,
    # Initialization
    "init.quality_ratio": 0.6,
    "init.quality_count": 20,
    "init.min_corrs": 100,
    "init.coverage": 0.7,
    "init.collinear_frac": 0.02,
    "init.max_dev": 1.0,
    "init.segment_min_len": 10,
    # Track-loss recovery
    "recovery.min_inliers": 100,
    "recovery.max_attempts": 3,
    # Loop closing
    "loop.enabled": True,
    "loop.quadrant_tol": 0.25,
    "loop.tau": 1.0,
    "loop.neighbor_deg": 30.0,
    "loop.neighbor_count": 5,
    "loop.min_inliers": 100,
    "loop.merge_px": 2.0,
    "loop.horn_tol": 0.05,
    # Evaluation and run control
    "eval.max_dt": 0.02,
    "run.deterministic": True,
}

KEY_VALUE_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def _coerce(key, value):
    # Coerce to the type of the default value
    default = DEFAULT_CONFIG[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def _as_yaml(text):
    # Rewrite "key=value" lines into "key: value" so one parser handles both forms
    lines = []
    for line in text.splitlines():
        match = KEY_VALUE_LINE.match(line)
        if match and ":" not in line.split("=", 1)[0]:
            lines.append("%s: %s" % (match.group(1), match.group(2)))
        else:
            lines.append(line)
    return "\n".join(lines)


def merge_config(overrides=None):
    """Return a full config dict: the defaults updated with the given overrides."""
    config = dict(DEFAULT_CONFIG)
    for key, value in (overrides or {}).items():
        if key not in DEFAULT_CONFIG:
            logger.warning("Ignoring unknown config key %s" % key)
            continue
        config[key] = _coerce(key, value)
    # The intersection tolerance follows the epiline tolerance unless set explicitly
    if overrides and "flow.epiline_tol" in overrides and "flow.intersection_tol" not in overrides:
        config["flow.intersection_tol"] = 2.0 * config["flow.epiline_tol"]
    return config


def read_config(config_file=None):
    """
    :param config_file: path to a YAML or key=value file, or None for the defaults
    :rtype: dict
    """
    if config_file is None:
        return merge_config()

    with open(config_file) as f:
        config_data = yaml.safe_load(_as_yaml(f.read()))

    if config_data is None:
        config_data = {}
    if not isinstance(config_data, dict):
        raise ValueError("Config file %s must contain a flat mapping of keys" % config_file)

    logger.info("Read %d config keys from %s" % (len(config_data), config_file))
    return merge_config(config_data)
