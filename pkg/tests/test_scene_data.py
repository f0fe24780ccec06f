import json

import numpy as np
import pytest

from errors import ContractError, FormatError, GenerationError
from scene_data import (MAX_SPEED, ROUTE_PROBS, SAMPLE_DT, SceneSet, exit_arm, follow_speed_correlation,
                        generate_follow, generate_intersection, generate_sceneset, intersection_mask, route_point,
                        scene_to_record, simulate_follow, split_sceneset)
from tensor import make_rng


def test_generator_is_deterministic():
    first = generate_sceneset(5, seed=11, kind="mixed")
    second = generate_sceneset(5, seed=11, kind="mixed")
    assert [scene_to_record(s) for s in first] == [scene_to_record(s) for s in second]
    assert [s.id for s in first] == ["s00000", "s00001", "s00002", "s00003", "s00004"]


def test_generated_scenes_are_valid():
    for scene in generate_sceneset(10, seed=1, max_agents_per_scene=4):
        assert 1 <= scene.n_agents <= 4
        assert scene.tau == 4 and scene.horizon == 6
        for agent in scene.agents:
            assert scene.mask.contains(agent.points).all()
            steps = np.linalg.norm(np.diff(agent.points, axis=0), axis=-1)
            assert steps.max() <= MAX_SPEED * SAMPLE_DT


def test_agents_are_ordered_by_distance_to_center():
    scene = generate_intersection(seed=5, n_agents=4)
    assert [a.id for a in scene.agents] == ["a0", "a1", "a2", "a3"]
    dist = [float(np.hypot(*a.past[-1])) for a in scene.agents]
    assert dist == sorted(dist)
    assert scene.id == "intersection-5"


def test_generator_argument_errors():
    with pytest.raises(GenerationError):
        generate_intersection(seed=0, n_agents=0)
    with pytest.raises(GenerationError):
        generate_sceneset(3, seed=0, kind="roundabout")
    with pytest.raises(GenerationError):
        generate_sceneset(0, seed=0)


def test_route_geometry():
    assert np.allclose(route_point("straight", np.array([0.0])), [[-4.0, -2.0]])
    assert np.allclose(route_point("left", np.array([-3.0])), [[-7.0, -2.0]])
    right_end = route_point("right", np.array([20.0]))[0]
    left_end = route_point("left", np.array([20.0]))[0]
    assert exit_arm(right_end) == "south" and exit_arm(left_end) == "north"
    assert exit_arm(route_point("straight", np.array([20.0]))[0]) == "east"
    assert exit_arm(np.array([0.5, -1.0])) == "center"
    with pytest.raises(GenerationError):
        route_point("follow", np.array([0.0]))


def test_intersection_mask_is_a_cross():
    mask = intersection_mask()
    assert mask.contains(np.array([[0.0, 20.0], [20.0, 0.0]])).all()
    assert not mask.contains(np.array([[10.0, 10.0]])).any()


@pytest.mark.slow
def test_route_frequencies_follow_the_prior():
    routes = []
    for seed in range(1000):
        routes.extend(generate_intersection(seed=seed, n_agents=4).routes())
    counts = {r: routes.count(r) / len(routes) for r in ROUTE_PROBS}
    for route, p in ROUTE_PROBS.items():
        assert counts[route] == pytest.approx(p, abs=0.03)


def test_one_entry_leads_to_several_routes():
    by_entry = {}
    for seed in range(400):
        agent = generate_intersection(seed=seed, n_agents=1).agents[0]
        by_entry.setdefault(exit_arm(agent.past[0]), []).append(agent)
    assert set(by_entry) == {"east", "west", "north", "south"}
    for entry, agents in by_entry.items():
        assert {a.route for a in agents} == set(ROUTE_PROBS), entry
        exits = {exit_arm(a.future[-1]) for a in agents} - {"center", entry}
        assert len(exits) > 1, entry
    routes = [a.route for agents in by_entry.values() for a in agents]
    for route, p in ROUTE_PROBS.items():
        assert routes.count(route) / len(routes) == pytest.approx(p, abs=0.08)


def test_braking_leader_slows_the_follower():
    rng = make_rng(3)
    _, lead_v, follow_x, follow_v = simulate_follow(rng, steps=40, brake=True)
    assert lead_v[-1] < lead_v[0]
    assert follow_v[-1] < follow_v.max()
    assert np.all(np.diff(follow_x) >= 0.0)


def test_follower_keeps_distance():
    lead_x, _, follow_x, _ = simulate_follow(make_rng(4), steps=20, brake=True)
    assert np.all(lead_x - follow_x >= 2.0 - 1e-12)


def test_follow_scenes():
    scene = generate_follow(seed=2)
    assert scene.n_agents == 2 and scene.routes() == ["follow", "follow"]
    assert follow_speed_correlation(generate_sceneset(40, seed=0, kind="follow")) > 0.9
    with pytest.raises(ContractError):
        follow_speed_correlation(generate_sceneset(2, seed=0))


def test_scene_validation():
    scene = generate_intersection(seed=1, n_agents=3)
    with pytest.raises(ContractError):
        scene.validate(max_agents=2)
    with pytest.raises(ContractError):
        scene.validate(horizon=5)
    scene.agents[0].future[-1] = [20.0, 20.0]
    with pytest.raises(ContractError):
        scene.validate()


def test_save_load_round_trip(tmp_path):
    data = generate_sceneset(4, seed=9, kind="mixed")
    path = str(tmp_path / "scenes.jsonl")
    data.save(path)
    loaded = SceneSet.load(path)
    assert loaded.header() == data.header()
    assert [scene_to_record(s) for s in loaded] == [scene_to_record(s) for s in data]


def corrupt(tmp_path, edit):
    data = generate_sceneset(3, seed=2)
    path = tmp_path / "scenes.jsonl"
    data.save(str(path))
    lines = path.read_text().splitlines()
    edit(lines)
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(FormatError) as info:
        SceneSet.load(str(path))
    assert info.value.line == 1


@pytest.mark.parametrize("edit,line", [
    (lambda lines: lines.__setitem__(0, lines[0].replace("latentformer-sceneset", "other")), 1),
    (lambda lines: lines.__setitem__(0, lines[0].replace('"version": 1', '"version": 9')), 1),
    (lambda lines: lines.__setitem__(2, "{broken"), 3),
    (lambda lines: lines.__setitem__(3, lines[3].replace('"agents": [', '"agents": [] , "x": [', 1)), 4),
    (lambda lines: lines.pop(), 1),
    (lambda lines: lines.__setitem__(2, lines[2].replace('"mask": ["', '"mask": ["2', 1)), 3),
])
def test_malformed_scene_files(tmp_path, edit, line):
    path = corrupt(tmp_path, edit)
    with pytest.raises(FormatError) as info:
        SceneSet.load(path)
    assert info.value.line == line


def test_format_error_names_the_scene(tmp_path):
    path = corrupt(tmp_path, lambda lines: lines.__setitem__(2, lines[2].replace('"mask": ["', '"mask": ["2', 1)))
    with pytest.raises(FormatError) as info:
        SceneSet.load(path)
    assert info.value.scene_id == "s00001"
    assert "line 3" in str(info.value)


def rewrite_mask(lines, index, rows_of):
    record = json.loads(lines[index])
    record["mask"] = rows_of(record["mask"])
    lines[index] = json.dumps(record)


@pytest.mark.parametrize("rows_of,message", [
    (lambda rows: ["2" + rows[0][1:]] + rows[1:], "only contain"),
    (lambda rows: ["0" * len(rows)] * len(rows), "no drivable pixel"),
])
def test_bad_mask_is_a_format_error(tmp_path, rows_of, message):
    path = corrupt(tmp_path, lambda lines: rewrite_mask(lines, 2, rows_of))
    with pytest.raises(FormatError, match=message) as info:
        SceneSet.load(path)
    assert info.value.line == 3
    assert info.value.scene_id == "s00001"


def test_split_is_seeded_and_disjoint():
    data = generate_sceneset(10, seed=0)
    train, test = split_sceneset(data, test_fraction=0.2, seed=1)
    again, _ = split_sceneset(data, test_fraction=0.2, seed=1)
    assert len(train) == 8 and len(test) == 2
    assert [s.id for s in train] == [s.id for s in again]
    assert not {s.id for s in train} & {s.id for s in test}
    with pytest.raises(ContractError):
        split_sceneset(SceneSet(scenes=data.scenes[:1]))


def test_frame_summary():
    frame = generate_sceneset(6, seed=4).to_frame()
    assert set(frame.columns) >= {"scene_id", "agent_id", "route", "mean_speed", "exit_arm"}
    assert (frame["mean_speed"] <= MAX_SPEED).all()
