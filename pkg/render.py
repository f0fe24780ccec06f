"""
Scene Rendering
===============

Draws a scene as SVG: drivable cells, agent boxes with heading triangles,
predicted trajectories coloured from blue (early) to red (late) and the ground
truth as a solid red line, with a legend and a 10 m scale bar.

Output bytes are deterministic for fixed input.
"""

import io
import logging
from typing import List, Optional, Tuple

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.collections import LineCollection, PatchCollection
from matplotlib.figure import Figure
from matplotlib.lines import Line2D
from matplotlib.patches import Patch, Polygon, Rectangle
import numpy as np

from scene_data import Scene

logger = logging.getLogger(__name__)

AGENT_LENGTH = 4.5
AGENT_WIDTH = 2.0
SCALE_BAR = 10.0
ROAD_COLOR = "#d9d9d9"
AGENT_COLOR = "#4d4d4d"
GT_COLOR = "#ff0000"
SVG_SALT = "latentformer"


def ramp_color(t: int, T: int) -> Tuple[float, float, float]:
    """Linear blue → red interpolation at t / (T - 1)."""
    w = 0.0 if T <= 1 else t / (T - 1)
    return (w, 0.0, 1.0 - w)


def drivable_cells(scene: Scene) -> List[Rectangle]:
    """One rectangle per horizontal run of drivable pixels."""
    mask = scene.mask
    res, (ox, oy) = mask.resolution, mask.origin
    cells = []
    for r, row in enumerate(mask.grid):
        padded = np.concatenate([[0], row, [0]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        for start, stop in zip(edges[::2], edges[1::2]):
            cells.append(Rectangle((ox + start * res, oy + r * res), (stop - start) * res, res))
    return cells


def heading(past: np.ndarray) -> float:
    delta = past[-1] - past[-2] if len(past) > 1 else np.array([1.0, 0.0])
    if np.allclose(delta, 0.0):
        return 0.0
    return float(np.arctan2(delta[1], delta[0]))


def agent_shapes(position: np.ndarray, angle: float) -> Tuple[np.ndarray, np.ndarray]:
    """Corners of the agent box and of its heading triangle."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    hl, hw = AGENT_LENGTH / 2, AGENT_WIDTH / 2
    box = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    tri = np.array([[hl * 0.2, -hw * 0.7], [hl * 0.9, 0.0], [hl * 0.2, hw * 0.7]])
    return position + box @ rot.T, position + tri @ rot.T


def prediction_segments(start: np.ndarray, points: np.ndarray) -> Tuple[np.ndarray, List[Tuple[float, float, float]]]:
    """Segments from the last observed point through T predicted points, one ramp colour each."""
    path = np.concatenate([start[None], points], axis=0)
    T = points.shape[0]
    segments = np.stack([path[:-1], path[1:]], axis=1)
    return segments, [ramp_color(t, T) for t in range(T)]


def build_figure(scene: Scene, predictions: Optional[np.ndarray] = None, title: Optional[str] = None) -> Figure:
    """`predictions` is [K, A, T, 2] (K mode-conditioned samples) or None."""
    fig = Figure(figsize=(6, 6))
    FigureCanvasSVG(fig)
    ax = fig.add_subplot(1, 1, 1)
    mask = scene.mask
    extent = mask.size * mask.resolution
    (ox, oy) = mask.origin

    ax.add_collection(PatchCollection(drivable_cells(scene), facecolor=ROAD_COLOR, edgecolor="none"))

    if predictions is not None:
        starts = scene.last_observed()
        for sample in np.asarray(predictions):
            for a in range(scene.n_agents):
                segments, colors = prediction_segments(starts[a], sample[a])
                ax.add_collection(LineCollection(segments, colors=colors, linewidths=1.2))

    for agent in scene.agents:
        gt = np.concatenate([agent.past[-1:], agent.future], axis=0)
        ax.plot(agent.past[:, 0], agent.past[:, 1], color=AGENT_COLOR, linewidth=1.0, linestyle=":")
        ax.plot(gt[:, 0], gt[:, 1], color=GT_COLOR, linewidth=1.8)
        box, tri = agent_shapes(agent.past[-1], heading(agent.past))
        ax.add_patch(Polygon(box, closed=True, facecolor=AGENT_COLOR, edgecolor="black", linewidth=0.6))
        ax.add_patch(Polygon(tri, closed=True, facecolor="white", edgecolor="none"))
        ax.annotate(agent.id, agent.past[-1] + np.array([0.0, 2.0]), fontsize=7, ha="center")

    x0, y0 = ox + 2.0, oy + 2.0
    ax.plot([x0, x0 + SCALE_BAR], [y0, y0], color="black", linewidth=2.0)
    ax.text(x0 + SCALE_BAR / 2, y0 + 0.8, f"{SCALE_BAR:g} m", ha="center", fontsize=8)

    handles = [Patch(facecolor=ROAD_COLOR, label="drivable area"),
               Line2D([0], [0], color=GT_COLOR, linewidth=1.8, label="ground truth"),
               Line2D([0], [0], color=ramp_color(0, 2), linewidth=1.2, label="prediction, early"),
               Line2D([0], [0], color=ramp_color(1, 2), linewidth=1.2, label="prediction, late")]
    ax.legend(handles=handles, loc="upper right", fontsize=7)
    ax.set_xlim(ox, ox + extent)
    ax.set_ylim(oy, oy + extent)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title or f"scene {scene.id}", fontsize=9)
    return fig


def render_svg(scene: Scene, predictions: Optional[np.ndarray] = None, title: Optional[str] = None) -> str:
    """SVG document for the scene, byte-identical for identical input."""
    fig = build_figure(scene, predictions, title)
    buffer = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def write_svg(path: str, scene: Scene, predictions: Optional[np.ndarray] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(render_svg(scene, predictions))
    logger.info(f"Rendered scene {scene.id} to {path}")
