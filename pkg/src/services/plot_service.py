"""
Plot Service - Trajectory Pictures

Renders the point motion of a flow as an SVG with time on the vertical axis
and space on the horizontal one. Coalesced trajectories are drawn once.
"""

from pathlib import Path
from typing import List, Tuple
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.core.config import settings  # noqa: E402
from src.models.schemas import FlowPathRecord  # noqa: E402

logger = logging.getLogger(__name__)

# fixed ids inside the SVG so identical records give identical files
matplotlib.rcParams["svg.hashsalt"] = "harris-flow"


def downsample_indices(count: int, max_points: int) -> np.ndarray:
    """At most max_points indices spread over range(count), ends included"""
    if count <= max_points:
        return np.arange(count)
    return np.unique(np.rint(np.linspace(0, count - 1, max_points)).astype(int))


def drawn_segments(record: FlowPathRecord) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    One polyline per label while it leads its cluster.

    A label leads while it is the lowest label of its cluster; its line runs
    up to the first recorded time after it joins a lower cluster, so every
    merged stretch of path is drawn exactly once.
    """
    ids = record.cluster_ids
    leads = np.ones_like(ids, dtype=bool)
    leads[:, 1:] = ids[:, 1:] != ids[:, :-1]
    last_time = ids.shape[0] - 1

    segments = []
    for label in range(ids.shape[1]):
        led = np.flatnonzero(leads[:, label])
        if led.size == 0:
            continue
        end = min(int(led[-1]) + 1, last_time)
        segments.append((record.values[: end + 1, label], record.times[: end + 1]))
    return segments


class PlotService:
    """Service for rendering flow trajectories"""

    def __init__(self, max_points: int = settings.svg_max_points):
        self.max_points = max_points

    def render_trajectories(self, record: FlowPathRecord, path: Path, title: str = "") -> Path:
        """
        Write an SVG of one replica's trajectories.

        Args:
            record: Flow record to draw
            path: Output file
            title: Optional plot title

        Returns:
            Path of the written SVG
        """
        keep = downsample_indices(record.times.size, self.max_points)
        thinned = record.model_copy(update={
            "times": record.times[keep],
            "values": record.values[keep],
            "cluster_ids": record.cluster_ids[keep],
            "cluster_counts": record.cluster_counts[keep],
        })

        fig, ax = plt.subplots(figsize=(6, 6))
        try:
            for x, t in drawn_segments(thinned):
                ax.plot(x, t, color="black", linewidth=0.6)
            ax.set_xlabel("x")
            ax.set_ylabel("t")
            ax.set_ylim(0.0, float(thinned.times[-1]))
            if title:
                ax.set_title(title)
            fig.savefig(path, format="svg", metadata={"Date": None})
        except Exception as e:
            logger.error(f"Failed to render {path}: {e}")
            raise
        finally:
            plt.close(fig)

        logger.info(f"Wrote {path}")
        return path
