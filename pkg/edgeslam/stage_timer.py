#!/usr/bin/env python3

import logging
import time
from collections import defaultdict
from contextlib import contextmanager

from humanfriendly import format_timespan

logger = logging.getLogger(__name__)

REPORTED_STAGES = ("edge", "flow", "keyframe", "pose", "map", "local_ba")


class StageTimer:
    """Wall-clock durations per named pipeline stage."""

    def __init__(self):
        self.durations = defaultdict(list)

    @contextmanager
    def measure(self, stage):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.durations[stage].append(time.perf_counter() - start)

    def mean_ms(self, stage):
        samples = self.durations.get(stage)
        if not samples:
            return 0.0
        return 1000.0 * sum(samples) / len(samples)

    def summary_ms(self, stages=REPORTED_STAGES):
        return {stage: round(self.mean_ms(stage), 3) for stage in stages}

    def log_summary(self):
        for stage in sorted(self.durations):
            samples = self.durations[stage]
            logger.info("Stage %-9s %5d calls, total %s, mean %.2f ms"
                        % (stage, len(samples), format_timespan(sum(samples)), self.mean_ms(stage)))
