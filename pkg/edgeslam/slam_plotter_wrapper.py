#!/usr/bin/env python3

import json
import logging
import os

import numpy as np
import pandas as pd

from edgeslam.dataset_io import DatasetError, TrajectoryRecord, load_groundtruth, record_positions
from edgeslam.eval_ate import AssociationError, associate, ate_rmse
from edgeslam.slam_plotter_gen import plot_data
from edgeslam.slam_run_wrapper import PLOTDATA_FILE, REPORT_FILE

logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s %(name)-12s %(levelname)-8s %(message)s',
                    datefmt='%m-%d %H:%M')

logger = logging.getLogger()

IDENTITY_QUATERNION = np.array([0.0, 0.0, 0.0, 1.0])


def read_plotdata(run_dir):
    plotdata_file = os.path.join(run_dir, PLOTDATA_FILE)
    if not os.path.isfile(plotdata_file):
        raise DatasetError("No %s in %s" % (PLOTDATA_FILE, run_dir))
    return pd.read_csv(plotdata_file)


def read_timings(run_dir):
    report_file = os.path.join(run_dir, REPORT_FILE)
    if not os.path.isfile(report_file):
        logger.warning("No %s in %s, timings left empty" % (REPORT_FILE, run_dir))
        return {}
    with open(report_file) as report_h:
        return json.load(report_h).get("timings_ms", {})


def dataset_records(dataset):
    """Positions only: the plotted trajectory carries no orientation."""
    return [TrajectoryRecord(timestamp=float(row.timestamp), position=np.array([row.x, row.y, row.z]),
                             orientation=IDENTITY_QUATERNION)
            for row in dataset.itertuples()]


def align_to_groundtruth(dataset, groundtruth_file, max_dt=0.02):
    """
    :return: (estimate moved into the ground-truth frame, matched ground truth, per-pose errors in cm)
    """
    pairs = associate(dataset_records(dataset), load_groundtruth(groundtruth_file), max_dt)
    report = ate_rmse(pairs)
    aligned = report.alignment.apply(record_positions([estimated for estimated, _ in pairs]))
    matched = record_positions([groundtruth for _, groundtruth in pairs])
    logger.info("ATE RMS %.3f cm over %d keyframes" % (report.rmse, report.count))
    return (pd.DataFrame(aligned, columns=["x", "y", "z"]), pd.DataFrame(matched, columns=["x", "y", "z"]),
            report.errors)


def main(args):

    # Log arguments
    for arg, value in sorted(vars(args).items()):
        logger.info("Argument %s: %r", arg, value)

    # Read run outputs
    try:
        dataset = read_plotdata(args.out)
    except DatasetError as error:
        logger.error("Bad input: %s" % error)
        return 1
    timings = read_timings(args.out)

    # Align to ground truth when we have it
    groundtruth, errors = None, None
    if args.gt is not None:
        try:
            dataset, groundtruth, errors = align_to_groundtruth(dataset, args.gt)
        except (DatasetError, AssociationError, ValueError) as error:
            logger.warning("Plotting without ground truth: %s" % error)

    # Plot trajectory, timings and errors
    logging.info("Generating plots")
    plot_data(dataset, timings, args.name, args.out, groundtruth=groundtruth, errors=errors)
    return 0
