#!/usr/bin/env python3
import os

import numpy as np
import pandas as pd
import matplotlib

matplotlib.use('agg')
import matplotlib.pyplot as plt
import humanfriendly
from matplotlib.ticker import FuncFormatter
from matplotlib.pylab import savefig

import seaborn as sns
import logging

from edgeslam.stage_timer import REPORTED_STAGES


# Plot keyframe trajectory
def plot_trajectory(dataset, name, plots_dir, groundtruth=None):
    """Top-down view of the keyframe centres, over the ground truth when given"""
    # Set up plotting structure
    fig, ax = plt.subplots(1)

    if groundtruth is not None:
        ax.plot(groundtruth["x"], groundtruth["y"], linestyle="--", color="Green", label="Ground truth")
    ax.plot(dataset["x"], dataset["y"], marker=".", color="Blue", label="Estimated keyframes")

    # Set x and y labels
    ax.set_title("Keyframe trajectory for %s" % name)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()

    # Format nicely
    fig.tight_layout()

    # Save and close figure
    savefig(os.path.join(plots_dir, "%s.trajectory.png" % name))
    plt.close('all')


# Plot mean stage timings
def plot_timings(timings, name, plots_dir):
    timing_frame = pd.DataFrame({"stage": list(REPORTED_STAGES),
                                 "mean_ms": [timings.get(stage, 0.0) for stage in REPORTED_STAGES]})

    # Open up a plotting frame
    fig, ax = plt.subplots(1)

    # Set seaborn style
    sns.set_style("darkgrid")

    sns.barplot(x="stage", y="mean_ms", data=timing_frame, color="SteelBlue", ax=ax)

    # Set y ticks
    ax.yaxis.set_major_formatter(FuncFormatter(y_ms_to_human_readable))

    # Set titles
    ax.set_title("Mean time per call for %s" % name)
    ax.set_xlabel("Stage")
    ax.set_ylabel("Mean time")

    # Ensure labels are not missed
    fig.tight_layout()

    # Save and close figure
    savefig(os.path.join(plots_dir, "%s.timings.png" % name))
    plt.close('all')


def plot_error_hist(errors, name, plots_dir):
    # Open up a plotting frame
    fig, ax = plt.subplots(1)

    # Set seaborn style
    sns.set_style("darkgrid")

    # Plot distribution
    sns.histplot(np.asarray(errors), kde=len(errors) > 1, ax=ax)

    # Despine left axis
    sns.despine(fig=fig, ax=ax, left=True)

    # Set titles
    ax.set_title("Absolute trajectory error for %s" % name)
    ax.set_xlabel("Error (cm)")

    # Ensure labels are not missed
    fig.tight_layout()

    # Save and close figure
    savefig(os.path.join(plots_dir, "%s.ate.hist.png" % name))
    plt.close('all')


def y_ms_to_human_readable(y, position):
    # Axis values are milliseconds
    if y <= 0:
        return "0"
    return humanfriendly.format_timespan(y / 1000.0, detailed=True)


def plot_data(dataset, timings, name, plots_dir, groundtruth=None, errors=None):
    plot_trajectory(dataset, name, plots_dir, groundtruth=groundtruth)
    plot_timings(timings, name, plots_dir)
    if errors is not None and len(errors):
        plot_error_hist(errors, name, plots_dir)

    logging.info("Finishing plotting")
