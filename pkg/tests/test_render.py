import xml.etree.ElementTree as ET

import numpy as np
import pytest
from matplotlib.colors import to_hex

from model import OracleModel
from render import drivable_cells, heading, prediction_segments, ramp_color, render_svg, write_svg
from scene_data import generate_follow, generate_intersection


@pytest.fixture(scope="module")
def scene():
    return generate_intersection(seed=2, n_agents=2)


def test_ramp_runs_blue_to_red():
    assert [to_hex(ramp_color(t, 6)) for t in (0, 1, 5)] == ["#0000ff", "#3300cc", "#ff0000"]
    assert ramp_color(0, 1) == (0.0, 0.0, 1.0)


def test_drivable_cells_cover_the_mask(scene):
    cells = drivable_cells(scene)
    area = sum(c.get_width() * c.get_height() for c in cells)
    assert area == pytest.approx(scene.mask.grid.sum() * scene.mask.resolution ** 2)


def test_prediction_segments_start_at_last_observation():
    start = np.array([1.0, 2.0])
    points = np.array([[2.0, 2.0], [3.0, 2.0], [4.0, 2.0]])
    segments, colors = prediction_segments(start, points)
    assert segments.shape == (3, 2, 2)
    assert np.array_equal(segments[0, 0], start) and np.array_equal(segments[-1, 1], points[-1])
    assert colors[0] == (0.0, 0.0, 1.0) and colors[-1] == (1.0, 0.0, 0.0)


def test_heading():
    assert heading(np.array([[0.0, 0.0], [0.0, 1.0]])) == pytest.approx(np.pi / 2)
    assert heading(np.array([[1.0, 1.0], [1.0, 1.0]])) == 0.0


def test_svg_is_well_formed_and_deterministic(scene):
    predictions = OracleModel().predict_modes(scene, k=2) + 0.5
    first = render_svg(scene, predictions)
    assert first == render_svg(scene, predictions)
    root = ET.fromstring(first)
    assert root.tag.endswith("svg")
    assert "#3300cc" in first and "#0000ff" in first
    assert "#3300cc" not in render_svg(scene)


def test_write_svg(tmp_path):
    path = tmp_path / "scene.svg"
    write_svg(str(path), generate_follow(seed=1))
    ET.parse(str(path))
