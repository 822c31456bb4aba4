#!/usr/bin/env python3

import json
import logging

from edgeslam.dataset_io import DatasetError, load_groundtruth
from edgeslam.eval_ate import AssociationError, associate, ate_rmse

logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s %(name)-12s %(levelname)-8s %(message)s',
                    datefmt='%m-%d %H:%M')

logger = logging.getLogger()


def main(args):

    # Log arguments
    for arg, value in sorted(vars(args).items()):
        logger.info("Argument %s: %r", arg, value)

    # Read both trajectories
    try:
        estimated = load_groundtruth(args.est)
        groundtruth = load_groundtruth(args.gt)
    except (DatasetError, OSError) as error:
        logger.error("Bad input: %s" % error)
        return 1

    # Associate and align
    try:
        report = ate_rmse(associate(estimated, groundtruth, args.max_dt))
    except (AssociationError, ValueError) as error:
        logger.error("Cannot evaluate: %s" % error)
        return 1

    logger.info("ATE RMS %.3f cm, mean %.3f cm, median %.3f cm, max %.3f cm over %d poses"
                % (report.rmse, report.mean, report.median, report.max, report.count))
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0
