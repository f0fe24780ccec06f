"""
Synthetic Scene Data
====================

Generates the road scenes the model trains and evaluates on, plus the
line-delimited scene-set file format.

Two generators:

* 4-way intersection: two 8 m wide roads crossing at the map center, agents
  approaching on the right-hand lane and going straight, left or right.
* car following: a single straight road, a leader that may brake and a follower
  holding a 1.5 s time gap.

Scenes use a metric frame centered on the map; positions are sampled at 2 Hz.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from errors import ContractError, DimensionError, FormatError, GenerationError
from map_encoder import DrivableMask
from tensor import make_rng
from trajectory_encoder import ObservationBatch

logger = logging.getLogger(__name__)

FORMAT_TAG = "latentformer-sceneset"
FORMAT_VERSION = 1

SAMPLE_DT = 0.5                 # seconds between samples (2 Hz)
MAX_SPEED = 15.0                # m/s
TAU = 4
HORIZON = 6
MAP_SIZE = 64
MAP_EXTENT = 50.0
ROAD_HALF_WIDTH = 4.0
LANE_OFFSET = 2.0
STOP_LINE = 4.0

ROUTES = ("straight", "left", "right", "follow")
ROUTE_PROBS = {"straight": 0.5, "left": 0.25, "right": 0.25}
ARMS = ("east", "north", "west", "south")

RIGHT_TURN_RADIUS = ROAD_HALF_WIDTH - LANE_OFFSET
LEFT_TURN_RADIUS = ROAD_HALF_WIDTH + LANE_OFFSET

# quarter-turn rotations, exact in floating point
_ROTATIONS = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, -1.0], [1.0, 0.0]]),
              np.array([[-1.0, 0.0], [0.0, -1.0]]), np.array([[0.0, 1.0], [-1.0, 0.0]])]


@dataclass
class AgentTrack:
    id: str
    past: np.ndarray
    future: np.ndarray
    route: str

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.past, self.future], axis=0)


@dataclass
class Scene:
    """Drivable mask plus per-agent past/future tracks in scene-frame metres."""
    id: str
    mask: DrivableMask
    agents: List[AgentTrack] = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def tau(self) -> int:
        return self.agents[0].past.shape[0] - 1

    @property
    def horizon(self) -> int:
        return self.agents[0].future.shape[0]

    def past_array(self) -> np.ndarray:
        return np.stack([a.past for a in self.agents])

    def future_array(self) -> np.ndarray:
        return np.stack([a.future for a in self.agents])

    def last_observed(self) -> np.ndarray:
        return self.past_array()[:, -1, :]

    def routes(self) -> List[str]:
        return [a.route for a in self.agents]

    def observation(self, capacity: Optional[int] = None) -> ObservationBatch:
        return ObservationBatch.from_tracks([a.past for a in self.agents], capacity)

    def validate(self, max_agents: int = 8, tau: Optional[int] = None, horizon: Optional[int] = None) -> "Scene":
        """Check agent count, track lengths, drivability and the speed limit."""
        if not 1 <= self.n_agents <= max_agents:
            raise ContractError(f"scene {self.id} has {self.n_agents} agents, allowed 1..{max_agents}")
        tau = self.tau if tau is None else tau
        horizon = self.horizon if horizon is None else horizon
        for agent in self.agents:
            if agent.past.shape != (tau + 1, 2) or agent.future.shape != (horizon, 2):
                raise ContractError(f"agent {agent.id} tracks are {agent.past.shape}/{agent.future.shape}, "
                                    f"expected ({tau + 1}, 2)/({horizon}, 2)")
            if agent.route not in ROUTES:
                raise ContractError(f"agent {agent.id} has unknown route {agent.route!r}")
            points = agent.points
            if not np.all(np.isfinite(points)):
                raise ContractError(f"agent {agent.id} has non-finite coordinates")
            if not self.mask.contains(points).all():
                raise ContractError(f"agent {agent.id} leaves the drivable area")
            steps = np.linalg.norm(np.diff(points, axis=0), axis=-1)
            if steps.size and steps.max() > MAX_SPEED * SAMPLE_DT:
                raise ContractError(f"agent {agent.id} exceeds {MAX_SPEED} m/s")
        return self


# --------------------------------------------------------------------------
# Road geometry
# --------------------------------------------------------------------------

def intersection_mask(size: int = MAP_SIZE, extent: float = MAP_EXTENT) -> DrivableMask:
    """Two perpendicular strips |x| <= 4 or |y| <= 4, tested at pixel centers."""
    blank = DrivableMask.centered(np.ones((size, size), dtype=np.uint8), extent)
    x, y = blank.pixel_centers()
    grid = (np.abs(x) <= ROAD_HALF_WIDTH) | (np.abs(y) <= ROAD_HALF_WIDTH)
    return DrivableMask.centered(grid.astype(np.uint8), extent)


def straight_road_mask(size: int = MAP_SIZE, extent: float = MAP_EXTENT) -> DrivableMask:
    blank = DrivableMask.centered(np.ones((size, size), dtype=np.uint8), extent)
    _, y = blank.pixel_centers()
    return DrivableMask.centered((np.abs(y) <= ROAD_HALF_WIDTH).astype(np.uint8), extent)


def route_point(route: str, s: np.ndarray) -> np.ndarray:
    """Centerline point at arc length `s` for an eastbound approach.

    s = 0 is the stop line at x = -4 on the lane y = -2; negative s lies on the
    approach. Turns are circular arcs tangent to both lanes.
    """
    s = np.asarray(s, dtype=np.float64)
    out = np.empty(s.shape + (2,))
    approach = s < 0
    out[approach] = np.stack([-STOP_LINE + s[approach], np.full(approach.sum(), -LANE_OFFSET)], axis=-1)
    ahead = ~approach
    sa = s[ahead]
    if route == "straight":
        pts = np.stack([-STOP_LINE + sa, np.full(sa.shape, -LANE_OFFSET)], axis=-1)
    elif route == "right":
        r, center = RIGHT_TURN_RADIUS, np.array([-STOP_LINE, -STOP_LINE])
        arc = r * np.pi / 2
        theta = np.pi / 2 - np.minimum(sa, arc) / r
        pts = center + r * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        beyond = sa > arc
        pts[beyond] = np.stack([np.full(beyond.sum(), -LANE_OFFSET), -STOP_LINE - (sa[beyond] - arc)], axis=-1)
    elif route == "left":
        r, center = LEFT_TURN_RADIUS, np.array([-STOP_LINE, STOP_LINE])
        arc = r * np.pi / 2
        theta = -np.pi / 2 + np.minimum(sa, arc) / r
        pts = center + r * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        beyond = sa > arc
        pts[beyond] = np.stack([np.full(beyond.sum(), LANE_OFFSET), STOP_LINE + (sa[beyond] - arc)], axis=-1)
    else:
        raise GenerationError(f"no intersection geometry for route {route!r}")
    out[ahead] = pts
    return out


def exit_arm(point: np.ndarray) -> str:
    """Arm a position lies on, or 'center' inside the crossing square."""
    x, y = float(point[0]), float(point[1])
    if max(abs(x), abs(y)) <= ROAD_HALF_WIDTH:
        return "center"
    if abs(x) >= abs(y):
        return "east" if x > 0 else "west"
    return "north" if y > 0 else "south"


def _jitter(clean: np.ndarray, mask: DrivableMask, rng: np.random.Generator, std: float) -> np.ndarray:
    if std <= 0:
        return clean.copy()
    noisy = clean + rng.normal(0.0, std, size=clean.shape)
    ok = mask.contains(noisy)
    return np.where(ok[:, None], noisy, clean)


def _order_by_center_distance(agents: List[AgentTrack]) -> List[AgentTrack]:
    ranked = sorted(agents, key=lambda a: (float(np.hypot(*a.past[-1])), a.id))
    for i, agent in enumerate(ranked):
        agent.id = f"a{i}"
    return ranked


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------

def generate_intersection(seed: int, n_agents: int, max_agents: int = 8, tau: int = TAU,
                          horizon: int = HORIZON, jitter: float = 0.05,
                          scene_id: Optional[str] = None) -> Scene:
    """One 4-way intersection scene with `n_agents` agents on random approaches."""
    if not 1 <= n_agents <= max_agents:
        raise GenerationError(f"n_agents must be in 1..{max_agents}, got {n_agents}")
    rng = make_rng(seed)
    mask = intersection_mask()
    times = np.arange(-tau, horizon + 1) * SAMPLE_DT
    routes = list(ROUTE_PROBS)
    weights = np.array([ROUTE_PROBS[r] for r in routes])
    agents = []
    for i in range(n_agents):
        for _ in range(100):
            speed = rng.uniform(3.0, 8.0)
            reach = min(1.5 * speed, 20.5 - 2.0 * speed)
            dist = rng.uniform(0.0, reach)
            route = routes[int(rng.choice(len(routes), p=weights))]
            arm = int(rng.integers(0, 4))
            clean = route_point(route, -dist + speed * times) @ _ROTATIONS[arm].T
            if mask.contains(clean).all():
                break
        else:
            raise GenerationError(f"could not place agent {i} of scene seed {seed} after 100 tries")
        pts = _jitter(clean, mask, rng, jitter)
        agents.append(AgentTrack(id=f"tmp{i}", past=pts[:tau + 1], future=pts[tau + 1:], route=route))
    scene = Scene(id=scene_id or f"intersection-{seed}", mask=mask, agents=_order_by_center_distance(agents))
    return scene.validate(max_agents=max_agents)


def simulate_follow(rng: np.random.Generator, steps: int, brake: bool,
                    dt: float = 0.1, per_sample: int = 5) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Leader/follower positions and speeds along x at every sample.

    The follower tracks a gap of 2 m + 1.5 s * speed and never closes below 2 m.
    """
    v_lead = rng.uniform(3.0, 6.0)
    v_follow = max(v_lead + rng.uniform(-0.5, 0.5), 0.0)
    x_lead = -8.0 + rng.uniform(-2.0, 2.0)
    gap = max(2.0 + 1.5 * v_follow + rng.uniform(-1.0, 1.0), 2.5)
    x_follow = x_lead - gap
    brake_start = rng.uniform(1.0, 3.0) if brake else np.inf
    lead_x, lead_v, follow_x, follow_v = [], [], [], []
    for k in range(steps * per_sample + 1):
        if k % per_sample == 0:
            lead_x.append(x_lead)
            lead_v.append(v_lead)
            follow_x.append(x_follow)
            follow_v.append(v_follow)
        t = k * dt
        a_lead = -3.0 if t >= brake_start else 0.0
        desired = 2.0 + 1.5 * v_follow
        a_follow = 0.5 * ((x_lead - x_follow) - desired) + 1.2 * (v_lead - v_follow)
        a_follow = float(np.clip(a_follow, -6.0, 2.0))
        v_lead = max(v_lead + a_lead * dt, 0.0)
        x_lead += v_lead * dt
        v_follow = min(max(v_follow + a_follow * dt, 0.0), 12.0)
        x_follow = min(x_follow + v_follow * dt, x_lead - 2.0)
    return np.array(lead_x), np.array(lead_v), np.array(follow_x), np.array(follow_v)


def generate_follow(seed: int, tau: int = TAU, horizon: int = HORIZON, jitter: float = 0.05,
                    scene_id: Optional[str] = None) -> Scene:
    """Leader and follower on one straight road; the leader brakes with probability 0.5."""
    rng = make_rng(seed)
    mask = straight_road_mask()
    brake = bool(rng.random() < 0.5)
    lead_x, _, follow_x, _ = simulate_follow(rng, tau + horizon, brake)
    lane = np.full(lead_x.shape, -LANE_OFFSET)
    agents = []
    for name, xs in (("leader", lead_x), ("follower", follow_x)):
        pts = _jitter(np.stack([xs, lane], axis=-1), mask, rng, jitter)
        agents.append(AgentTrack(id=name, past=pts[:tau + 1], future=pts[tau + 1:], route="follow"))
    scene = Scene(id=scene_id or f"follow-{seed}", mask=mask, agents=_order_by_center_distance(agents))
    return scene.validate()


def generate_sceneset(n_scenes: int, seed: int, kind: str = "intersection", max_agents_per_scene: int = 3,
                      jitter: float = 0.05, tau: int = TAU, horizon: int = HORIZON) -> "SceneSet":
    """Deterministic scene set; scene i draws its own seed from the set seed."""
    if kind not in ("intersection", "follow", "mixed"):
        raise GenerationError(f"kind must be intersection, follow or mixed, got {kind!r}")
    if n_scenes < 1:
        raise GenerationError(f"need at least one scene, got {n_scenes}")
    master = make_rng(seed)
    scene_seeds = master.integers(0, 2 ** 31 - 1, size=n_scenes)
    agent_counts = master.integers(1, max_agents_per_scene + 1, size=n_scenes)
    scenes = []
    for i in range(n_scenes):
        scene_kind = kind if kind != "mixed" else ("intersection" if i % 2 == 0 else "follow")
        sid = f"s{i:05d}"
        if scene_kind == "intersection":
            scenes.append(generate_intersection(int(scene_seeds[i]), int(agent_counts[i]), tau=tau, horizon=horizon,
                                                jitter=jitter, scene_id=sid))
        else:
            scenes.append(generate_follow(int(scene_seeds[i]), tau=tau, horizon=horizon, jitter=jitter, scene_id=sid))
    logger.info(f"Generated {n_scenes} {kind} scenes with seed {seed}")
    return SceneSet(scenes=scenes, tau=tau, horizon=horizon)


# --------------------------------------------------------------------------
# Scene sets and the file format
# --------------------------------------------------------------------------

@dataclass
class SceneSet:
    scenes: List[Scene]
    tau: int = TAU
    horizon: int = HORIZON
    resolution: float = MAP_EXTENT / MAP_SIZE
    size: int = MAP_SIZE
    origin: Tuple[float, float] = (-MAP_EXTENT / 2, -MAP_EXTENT / 2)

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self) -> Iterator[Scene]:
        return iter(self.scenes)

    def __getitem__(self, i: int) -> Scene:
        return self.scenes[i]

    def by_id(self, scene_id: str) -> Scene:
        for scene in self.scenes:
            if scene.id == scene_id:
                return scene
        raise KeyError(scene_id)

    def header(self) -> Dict:
        return {"format": FORMAT_TAG, "version": FORMAT_VERSION, "tau": self.tau, "T": self.horizon,
                "resolution": self.resolution, "size": self.size, "origin": list(self.origin),
                "scenes": len(self.scenes)}

    def to_frame(self) -> pd.DataFrame:
        """One row per agent with route, speeds and exit arm."""
        rows = []
        for scene in self.scenes:
            for agent in scene.agents:
                speeds = np.linalg.norm(np.diff(agent.points, axis=0), axis=-1) / SAMPLE_DT
                rows.append({
                    "scene_id": scene.id,
                    "agent_id": agent.id,
                    "route": agent.route,
                    "n_agents": scene.n_agents,
                    "mean_speed": float(speeds.mean()),
                    "exit_arm": exit_arm(agent.future[-1]),
                })
        return pd.DataFrame(rows)

    def route_frequencies(self) -> pd.Series:
        frame = self.to_frame()
        return frame["route"].value_counts(normalize=True).sort_index()

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(self.header()) + "\n")
            for scene in self.scenes:
                f.write(json.dumps(scene_to_record(scene)) + "\n")
        logger.info(f"Saved {len(self.scenes)} scenes to {path}")

    @classmethod
    def load(cls, path: str, max_agents: int = 8) -> "SceneSet":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines:
            raise FormatError(f"{path} is empty", line=1)
        header = parse_record_line(lines[0], 1)
        if header.get("format") != FORMAT_TAG:
            raise FormatError(f"not a scene-set file (format={header.get('format')!r})", line=1)
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported scene-set version {header.get('version')!r}", line=1)
        try:
            sceneset = cls(scenes=[], tau=int(header["tau"]), horizon=int(header["T"]),
                           resolution=float(header["resolution"]), size=int(header["size"]),
                           origin=tuple(float(v) for v in header["origin"]))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed header: {e}", line=1) from None
        for number, text in enumerate(lines[1:], start=2):
            if not text.strip():
                continue
            sceneset.scenes.append(scene_from_record(parse_record_line(text, number), sceneset, number, max_agents))
        if "scenes" in header and header["scenes"] != len(sceneset.scenes):
            raise FormatError(f"header announces {header['scenes']} scenes, file holds {len(sceneset.scenes)}",
                              line=1)
        logger.info(f"Loaded {len(sceneset.scenes)} scenes from {path}")
        return sceneset


def parse_record_line(text: str, number: int) -> Dict:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", line=number) from None
    if not isinstance(record, dict):
        raise FormatError("record is not a JSON object", line=number)
    return record


def scene_to_record(scene: Scene) -> Dict:
    return {
        "id": scene.id,
        "mask": scene.mask.to_rows(),
        "agents": [{"id": a.id, "route": a.route, "past": a.past.tolist(), "future": a.future.tolist()}
                   for a in scene.agents],
    }


def scene_from_record(record: Dict, sceneset: SceneSet, number: int, max_agents: int = 8) -> Scene:
    scene_id = record.get("id")
    if not isinstance(scene_id, str):
        raise FormatError("scene record has no string id", line=number)
    try:
        rows = record["mask"]
        if len(rows) != sceneset.size or any(len(r) != sceneset.size for r in rows):
            raise FormatError(f"mask must be {sceneset.size} rows of {sceneset.size} characters",
                              line=number, scene_id=scene_id)
        try:
            mask = DrivableMask.from_rows(rows, sceneset.resolution, sceneset.origin)
        except (ContractError, DimensionError) as e:
            raise FormatError(str(e), line=number, scene_id=scene_id) from None
        agents = [AgentTrack(id=str(a["id"]), past=np.array(a["past"], dtype=np.float64),
                             future=np.array(a["future"], dtype=np.float64), route=str(a["route"]))
                  for a in record["agents"]]
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed scene record: {e}", line=number, scene_id=scene_id) from None
    if not agents:
        raise FormatError("scene has no agents", line=number, scene_id=scene_id)
    scene = Scene(id=scene_id, mask=mask, agents=agents)
    try:
        scene.validate(max_agents=max_agents, tau=sceneset.tau, horizon=sceneset.horizon)
    except ContractError as e:
        raise FormatError(str(e), line=number, scene_id=scene_id) from None
    return scene


def split_sceneset(sceneset: SceneSet, test_fraction: float = 0.2, seed: int = 0) -> Tuple[SceneSet, SceneSet]:
    """Seeded train/test split that keeps the set's geometry header."""
    if len(sceneset) < 2:
        raise ContractError("need at least two scenes to split")
    train, test = train_test_split(sceneset.scenes, test_size=test_fraction, random_state=seed, shuffle=True)

    def subset(scenes: Sequence[Scene]) -> SceneSet:
        return SceneSet(scenes=list(scenes), tau=sceneset.tau, horizon=sceneset.horizon,
                        resolution=sceneset.resolution, size=sceneset.size, origin=sceneset.origin)
    return subset(train), subset(test)


def follow_speed_correlation(sceneset: SceneSet) -> float:
    """Pearson correlation of leader and follower speed profiles pooled over follow scenes."""
    lead, follow = [], []
    for scene in sceneset:
        if scene.routes() != ["follow", "follow"]:
            continue
        tracks = sorted(scene.agents, key=lambda a: -a.points[-1, 0])
        for agent, bucket in ((tracks[0], lead), (tracks[1], follow)):
            bucket.append(np.linalg.norm(np.diff(agent.points, axis=0), axis=-1) / SAMPLE_DT)
    if not lead:
        raise ContractError("scene set has no follow scenes")
    return float(pd.Series(np.concatenate(lead)).corr(pd.Series(np.concatenate(follow))))
