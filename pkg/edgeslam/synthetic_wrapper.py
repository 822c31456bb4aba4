#!/usr/bin/env python3

import logging
import os

from edgeslam.synthetic import write_synthetic_sequence

logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s %(name)-12s %(levelname)-8s %(message)s',
                    datefmt='%m-%d %H:%M')

logger = logging.getLogger()


def main(args):

    # Log arguments
    for arg, value in sorted(vars(args).items()):
        logger.info("Argument %s: %r", arg, value)

    if args.frames < 2:
        logger.error("A sequence needs at least 2 frames, got %d" % args.frames)
        return 1
    if not 0 < args.arc <= 360.0:
        logger.error("Orbit arc must lie in (0, 360] degrees, got %s" % args.arc)
        return 1

    # Check out dir exists
    if not os.path.isdir(args.out):
        os.makedirs(args.out)

    write_synthetic_sequence(args.out, n_frames=args.frames, noise_level=args.noise, seed=args.seed,
                             arc_deg=args.arc)
    return 0
