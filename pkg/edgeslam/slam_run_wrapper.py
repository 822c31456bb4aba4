#!/usr/bin/env python3

import json
import logging
import os

import cv2
import pandas as pd

from edgeslam.config import read_config
from edgeslam.dataset_io import (DatasetError, iter_tum_frames, load_calibration, load_groundtruth,
                                 read_tum_index, records_from_keyframes, write_pointcloud_ply,
                                 write_trajectory_tum)
from edgeslam.eval_ate import AssociationError, associate, ate_rmse
from edgeslam.flow_track import EdgeTracker
from edgeslam.slam_pipeline import EdgeSlam, InitializationFailed, TrackingFailed
from edgeslam.stage_timer import StageTimer

logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s %(name)-12s %(levelname)-8s %(message)s',
                    datefmt='%m-%d %H:%M')

logger = logging.getLogger()

EXIT_OK = 0
EXIT_BAD_INPUT = 1
EXIT_INIT_FAILED = 2
EXIT_TRACKING_FAILED = 3

STATUS_BY_CODE = {EXIT_OK: "ok", EXIT_BAD_INPUT: "bad_input",
                  EXIT_INIT_FAILED: "initialization_failed", EXIT_TRACKING_FAILED: "tracking_failed"}

TRAJECTORY_FILE = "trajectory.txt"
MAP_FILE = "map.ply"
REPORT_FILE = "report.json"
PLOTDATA_FILE = "plotdata.csv"
QUALITY_FILE = "quality.json"


def run_config(args):
    config = read_config(args.config)
    if args.seed is not None:
        config["ransac.seed"] = args.seed
    return config


def run_sequence(frames, intrinsics, config, tracker=None, stop_after_init=False, timer=None):
    """
    Drive the tracker and the SLAM back end over a frame stream.
    :return: (EdgeSlam, exit code); the map is collected even when tracking fails
    """
    timer = timer or StageTimer()
    tracker = tracker or EdgeTracker(config, timer=timer)
    slam = EdgeSlam(intrinsics, tracker, config, timer=timer)
    exit_code = EXIT_OK
    try:
        for frame in frames:
            tracked = tracker.track(frame)
            if tracked is None:
                continue
            slam.process(tracked)
            if stop_after_init and slam.initialized:
                break
    except TrackingFailed as failure:
        logger.error("Tracking failed at frame %d: %s" % (failure.frame_index, failure))
        exit_code = EXIT_TRACKING_FAILED
    finally:
        slam.finish()

    if exit_code == EXIT_OK:
        try:
            require_map(slam)
        except InitializationFailed as failure:
            logger.error("%s (last frame %s)" % (failure, slam.last_frame_index))
            exit_code = EXIT_INIT_FAILED
    return slam, exit_code


def require_map(slam):
    if not slam.initialized:
        raise InitializationFailed("No initialization pair accepted after %d attempts" % len(slam.init_attempts))
    return slam.slam_map


def validated_frames(frames, intrinsics):
    """Check the calibration against the first frame's size."""
    for frame in frames:
        if frame.index == 0:
            intrinsics.validate_image_size(frame.width, frame.height)
        yield frame


def keyframe_table(slam_map):
    rows = []
    if slam_map is not None:
        for keyframe in slam_map.ordered_keyframes():
            rows.append({"keyframe_id": keyframe.id, "frame_index": keyframe.frame_index,
                         "timestamp": keyframe.timestamp, "x": keyframe.pose.center[0],
                         "y": keyframe.pose.center[1], "z": keyframe.pose.center[2]})
    return pd.DataFrame(rows, columns=["keyframe_id", "frame_index", "timestamp", "x", "y", "z"])


def keyframe_ate(records, groundtruth_file, max_dt):
    try:
        return ate_rmse(associate(records, load_groundtruth(groundtruth_file), max_dt))
    except (AssociationError, DatasetError, OSError, ValueError) as error:
        logger.warning("No ATE: %s" % error)
        return None


def write_json(summary, path):
    with open(path, "w") as output_handle:
        json.dump(summary, output_handle, indent=2, sort_keys=True)
        output_handle.write("\n")


def write_run_artifacts(slam, exit_code, out_dir, timer, groundtruth_file=None, max_dt=0.02):
    slam_map = slam.slam_map
    keyframes = list(slam_map.ordered_keyframes()) if slam_map is not None else []
    records = records_from_keyframes(keyframes)

    # Trajectory and point cloud
    write_trajectory_tum(records, os.path.join(out_dir, TRAJECTORY_FILE))
    points = slam_map.point_array() if slam_map is not None else []
    skipped = write_pointcloud_ply(points, os.path.join(out_dir, MAP_FILE))

    # Per-keyframe positions
    keyframe_table(slam_map).to_csv(os.path.join(out_dir, PLOTDATA_FILE), index=False)

    report = {"ate_rmse_cm": None,
              "keyframes": len(keyframes),
              "points": len(slam_map.points) if slam_map is not None else 0,
              "skipped_points": skipped,
              "recoveries": slam.recoveries,
              "loops_closed": slam.loops_closed,
              "init_attempts": len(slam.init_attempts),
              "timings_ms": timer.summary_ms(),
              "last_frame": slam.last_frame_index,
              "status": STATUS_BY_CODE[exit_code]}

    if groundtruth_file is not None and records:
        ate = keyframe_ate(records, groundtruth_file, max_dt)
        if ate is not None:
            report.update(ate.as_dict())
            logger.info("Keyframe ATE RMS %.3f cm over %d poses" % (ate.rmse, ate.count))

    write_json(report, os.path.join(out_dir, REPORT_FILE))
    return report


def write_quality(slam, exit_code, out_dir):
    accepted = [attempt for attempt in slam.init_attempts if attempt.accepted]
    summary = {"attempts": [attempt.as_dict() for attempt in slam.init_attempts],
               "accepted": accepted[0].as_dict() if accepted else None,
               "last_frame": slam.last_frame_index,
               "status": STATUS_BY_CODE[exit_code]}
    write_json(summary, os.path.join(out_dir, QUALITY_FILE))
    return summary


def main(args):

    # Log arguments
    for arg, value in sorted(vars(args).items()):
        logger.info("Argument %s: %r", arg, value)

    # Check out dir exists
    if not os.path.isdir(args.out):
        os.makedirs(args.out)

    # Read config, calibration and index
    try:
        config = run_config(args)
        intrinsics = load_calibration(args.calib)
        index = read_tum_index(args.sequence)
    except (DatasetError, OSError, ValueError) as error:
        logger.error("Bad input: %s" % error)
        return EXIT_BAD_INPUT

    # Run the pipeline
    if config["run.deterministic"]:
        cv2.setNumThreads(1)
    init_only = args.command == "init-only"
    timer = StageTimer()
    try:
        slam, exit_code = run_sequence(validated_frames(iter_tum_frames(index), intrinsics), intrinsics,
                                       config, stop_after_init=init_only, timer=timer)
    except DatasetError as error:
        logger.error("Bad input: %s" % error)
        return EXIT_BAD_INPUT
    timer.log_summary()

    # Write outputs
    if init_only:
        write_quality(slam, exit_code, args.out)
    else:
        write_run_artifacts(slam, exit_code, args.out, timer, groundtruth_file=args.gt,
                            max_dt=config["eval.max_dt"])

    logger.info("Finished with status %s" % STATUS_BY_CODE[exit_code])
    return exit_code
