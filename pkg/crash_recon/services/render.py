"""
Static SVG sketch of a case: road curves, lane polygons, surveyed points,
reconstructed trajectories and the accident location.
"""

import io
import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from crash_recon.core.config import RenderSettings  # noqa: E402
from crash_recon.core.io import atomic_write_bytes  # noqa: E402
from crash_recon.schemas.case import AccidentCase  # noqa: E402
from crash_recon.services.reconstruct import Reconstruction  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed id salt so identical inputs give identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "crash-recon"


def render_case(case: AccidentCase, reconstruction: Optional[Reconstruction] = None,
                settings: Optional[RenderSettings] = None) -> bytes:
    """
    Draw one case
    :param reconstruction: optional reconstructed trajectories drawn over the survey points
    :return: SVG document as UTF-8 bytes
    """
    settings = settings or RenderSettings()
    colors = settings.colors
    vehicle_colors = colors["vehicles"].split(",")

    fig = Figure(figsize=(settings.width_in, settings.height_in))
    ax = fig.add_subplot(1, 1, 1)
    ax.set_aspect("equal")
    ax.set_title(case.case_id)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")

    geometry = case.geometry
    for ring in geometry.lane_polygons:
        xs, ys = zip(*ring)
        ax.fill(xs, ys, color=colors["lane_polygon"], zorder=0)
    for poly in geometry.curves:
        pts = poly.as_array()
        ax.plot(pts[:, 0], pts[:, 1], color=colors.get(poly.category.value, colors["other"]), lw=1.2, zorder=1)
    for lane in geometry.lane_centerlines:
        pts = lane.as_array()
        ax.plot(pts[:, 0], pts[:, 1], color=colors["centerline"], lw=0.8, ls="--", zorder=1)

    for slot in case.valid_slots():
        color = vehicle_colors[slot % len(vehicle_colors)]
        label = f"V{slot + 1}"
        if reconstruction is not None and reconstruction.valid[slot]:
            p = reconstruction.positions[slot]
            ax.plot(p[:, 0], p[:, 1], color=color, lw=1.6, zorder=3, label=label)
            ax.plot(p[-1, 0], p[-1, 1], marker="s", color=color, ms=5, zorder=4)
            label = None
        points = case.raw_points[slot]
        if points:
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            ax.plot(xs, ys, ls="none", marker="o", mfc="none", color=color, ms=4, zorder=3, label=label)

    location = case.annotations.accident_location
    if location is not None:
        ax.plot(*location, marker="x", color=colors["accident"], ms=10, mew=2, zorder=5, label="accident")
        ax.set_xlim(location[0] - 60.0, location[0] + 60.0)
        ax.set_ylim(location[1] - 60.0, location[1] + 60.0)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper right", fontsize=8)

    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def render_svg(case: AccidentCase, out: Union[str, Path], reconstruction: Optional[Reconstruction] = None,
               settings: Optional[RenderSettings] = None) -> Path:
    path = atomic_write_bytes(out, render_case(case, reconstruction, settings))
    logger.info(f"{case.case_id}: sketch written to {path}")
    return path
