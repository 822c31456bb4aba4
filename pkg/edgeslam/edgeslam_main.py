#!/usr/bin/env python3

import sys
import argparse
import edgeslam.version


# Return version number
def get_version():
    return edgeslam.__version__


# Run the function we select through argparse
def run_function(args):
    # Which verb did we choose?
    if args.command in ("run", "init-only"):
        import edgeslam.slam_run_wrapper as command_to_run
    elif args.command == "eval":
        import edgeslam.slam_eval_wrapper as command_to_run
    elif args.command == "plot":
        import edgeslam.slam_plotter_wrapper as command_to_run
    elif args.command == "synth":
        import edgeslam.synthetic_wrapper as command_to_run
    else:
        return 0

    # Now run it!
    return command_to_run.main(args)


def add_run_arguments(run_parser):
    run_parser.add_argument("--sequence", required=True,
                            help="TUM-format sequence directory (rgb.txt and the images it lists)")
    run_parser.add_argument("--calib", required=True,
                            help="Calibration file with 'fx fy cx cy [r]'")
    run_parser.add_argument("--out", required=True,
                            help="Output directory")
    run_parser.add_argument("--gt", default=None,
                            help="Ground-truth trajectory in TUM format")
    run_parser.add_argument("--seed", type=int, default=None,
                            help="RANSAC seed, overrides ransac.seed")
    run_parser.add_argument("--config", default=None,
                            help="YAML or key=value config file")
    run_parser.set_defaults(func=run_function)


# Define main script:
def main():
    # Create edgeslam parser
    parser = argparse.ArgumentParser(prog='edgeslam', description="Edge-based monocular SLAM")
    parser.add_argument("--version", help="Get version of edgeslam",
                        action="version",
                        version=edgeslam.__version__)

    subparsers = parser.add_subparsers(help="Callable edgeslam functions", dest="command")

    # Full pipeline
    run_parser = subparsers.add_parser('run',
                                       help="Run SLAM on a sequence and write trajectory, map and report")
    add_run_arguments(run_parser)

    # Initialization only
    init_parser = subparsers.add_parser('init-only',
                                        help="Stop after two-view initialization and write quality.json")
    add_run_arguments(init_parser)

    # Evaluation
    eval_parser = subparsers.add_parser('eval',
                                        help="Absolute trajectory error of an estimate against ground truth")
    eval_parser.add_argument("--est", required=True,
                             help="Estimated trajectory in TUM format")
    eval_parser.add_argument("--gt", required=True,
                             help="Ground-truth trajectory in TUM format")
    eval_parser.add_argument("--max_dt", type=float, default=0.02,
                             help="Largest timestamp difference for association (s)")
    eval_parser.set_defaults(func=run_function)

    # Plotter
    plotter_parser = subparsers.add_parser('plot',
                                           help="Plot trajectory, timings and errors of a run directory")
    plotter_parser.add_argument("--out", type=str, required=True,
                                help="Run directory holding plotdata.csv and report.json; plots go here too")
    plotter_parser.add_argument("--gt", type=str, default=None,
                                help="Ground-truth trajectory in TUM format")
    plotter_parser.add_argument("--name", type=str, required=True,
                                help="Titles for plots")
    plotter_parser.set_defaults(func=run_function)

    # Synthetic sequence
    synth_parser = subparsers.add_parser('synth',
                                         help="Write a synthetic wireframe sequence in TUM format")
    synth_parser.add_argument("--out", required=True,
                              help="Sequence directory to create")
    synth_parser.add_argument("--frames", type=int, default=120,
                              help="Number of frames around the circle")
    synth_parser.add_argument("--noise", type=float, default=2.0,
                              help="Gaussian image noise (gray levels)")
    synth_parser.add_argument("--seed", type=int, default=0,
                              help="Noise seed")
    synth_parser.add_argument("--arc", type=float, default=360.0,
                              help="Degrees of the orbit the sequence covers")
    synth_parser.set_defaults(func=run_function)

    args = parser.parse_args()

    # Print help if just 'edgeslam' is typed in.
    if len(sys.argv) == 1:
        parser.print_help()
    else:
        sys.exit(args.func(args))


if __name__ == "__main__":
    main()
