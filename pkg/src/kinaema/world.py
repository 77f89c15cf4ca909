"""Synthetic 2D world: scenes of feature landmarks, a 1-D "retina" sensor,
greedy goal-pursuit trajectories and perturbed alternative views.

Poses live in a rectangular arena ``[0, W] x [0, H]`` with heading measured
counter-clockwise from the +x axis.  Egocentric frames put +x ahead and +y
to the left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from kinaema.errors import ConfigError, DomainError, InputError
from kinaema.seeding import derive_seed, rng_for

ACTIONS = ("forward", "left", "right")

# (forward step in meters, turn increment in degrees)
ACTION_PROFILES = {
    "train": (0.10, 5.0),
    "eval": (0.25, 10.0),
}


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    return math.pi - (math.pi - a) % (2 * math.pi)


@dataclass(frozen=True)
class WorldConfig:
    arena_width: float = 6.0
    arena_height: float = 6.0
    landmarks: int = 32
    feature_dim: int = 8
    bins: int = 16
    fov_deg: float = 90.0
    max_range: float = 5.0
    goal_margin: float = 0.5
    min_goal_distance: float = 1.0
    alt_offset: float = 0.5
    alt_pan_deg: float = 50.0
    fov_jitter: bool = False
    max_interval: int = 8
    retina_noise: float = 0.0
    odometry_noise: float = 0.0

    @property
    def retina_dim(self) -> int:
        return self.bins * self.feature_dim

    def validate(self) -> None:
        if self.landmarks < 1:
            raise ConfigError("a scene needs at least one landmark")
        if self.feature_dim < 1 or self.bins < 1:
            raise ConfigError("feature_dim and bins must be positive")
        if self.arena_width <= 2 * self.goal_margin or self.arena_height <= 2 * self.goal_margin:
            raise ConfigError("arena too small for the goal margin")
        if not 0 < self.fov_deg < 360:
            raise ConfigError("fov_deg must lie in (0, 360)")
        if self.max_interval < 1:
            raise ConfigError("max_interval must be >= 1")


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass(frozen=True)
class RelPose:
    distance: float
    bearing: float
    rotation: tuple[float, float]

    def as_vector(self) -> np.ndarray:
        """(distance, cos bearing, sin bearing, cos rotation, sin rotation)"""
        return np.array([self.distance, math.cos(self.bearing), math.sin(self.bearing),
                         self.rotation[0], self.rotation[1]])


@dataclass
class Scene:
    id: str
    width: float
    height: float
    positions: np.ndarray  # (L, 2)
    features: np.ndarray  # (L, F), unit rows
    rng_seed: int


@dataclass
class EpisodeRecord:
    """One trajectory.  ``poses[0]`` is the start; observation ``t`` was taken
    at ``poses[t + 1]`` and its odometry is the motion ``poses[t] -> poses[t + 1]``.
    """
    scene_id: str
    profile: str
    poses: np.ndarray  # (T+1, 3)
    retinas: np.ndarray  # (T, K*F)
    odometry: np.ndarray  # (T, 4)
    alt_poses: np.ndarray  # (T, 3)
    alt_retinas: np.ndarray  # (T, K*F)
    actions: list[list[str]] = field(default_factory=list)
    goals: np.ndarray | None = None  # (T, 2) goal pursued when each observation was reached

    @property
    def length(self) -> int:
        return len(self.retinas)

    def slice(self, start: int, length: int) -> "EpisodeRecord":
        """Sub-episode of ``length`` observations beginning at observation ``start``.

        The first odometry of the slice is reset to the zero motion.
        """
        if start < 0 or start + length > self.length:
            raise InputError(f"slice [{start}, {start + length}) outside episode of length {self.length}")
        odo = self.odometry[start:start + length].copy()
        odo[0] = (0.0, 0.0, 1.0, 0.0)
        poses = np.concatenate([self.poses[start + 1:start + 2], self.poses[start + 1:start + length + 1]])
        return EpisodeRecord(
            scene_id=self.scene_id, profile=self.profile, poses=poses,
            retinas=self.retinas[start:start + length], odometry=odo,
            alt_poses=self.alt_poses[start:start + length],
            alt_retinas=self.alt_retinas[start:start + length],
            actions=self.actions[start:start + length] if self.actions else [],
            goals=None if self.goals is None else self.goals[start:start + length],
        )


# -- scenes and sensing ---------------------------------------------------------

def make_scene(seed: int, config: WorldConfig = WorldConfig(), scene_id: str | None = None) -> Scene:
    config.validate()
    rng = rng_for(seed, "scene")
    positions = np.column_stack([
        rng.uniform(0.0, config.arena_width, config.landmarks),
        rng.uniform(0.0, config.arena_height, config.landmarks),
    ])
    features = rng.normal(size=(config.landmarks, config.feature_dim))
    features /= np.linalg.norm(features, axis=1, keepdims=True)
    return Scene(scene_id or f"scene-{seed}", config.arena_width, config.arena_height,
                 positions, features, seed)


def in_arena(scene: Scene, x: float, y: float) -> bool:
    return 0.0 <= x <= scene.width and 0.0 <= y <= scene.height


def _visible(scene: Scene, pose: Pose, config: WorldConfig, fov_deg: float | None):
    if not in_arena(scene, pose.x, pose.y):
        raise DomainError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside the arena")
    fov = math.radians(config.fov_deg if fov_deg is None else fov_deg)
    rel = scene.positions - (pose.x, pose.y)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    ahead = rel[:, 0] * c + rel[:, 1] * s
    left = -rel[:, 0] * s + rel[:, 1] * c
    dist = np.hypot(ahead, left)
    bearing = np.arctan2(left, ahead)
    visible = (dist <= config.max_range) & (bearing >= -fov / 2) & (bearing < fov / 2)
    bins = np.floor((bearing + fov / 2) / (fov / config.bins)).astype(int)
    return visible, np.clip(bins, 0, config.bins - 1), dist


def contributing_landmarks(scene: Scene, pose: Pose, config: WorldConfig = WorldConfig(),
                           fov_deg: float | None = None) -> np.ndarray:
    """Indices of landmarks that show up in the retina at ``pose``."""
    return np.flatnonzero(_visible(scene, pose, config, fov_deg)[0])


def render(scene: Scene, pose: Pose, config: WorldConfig = WorldConfig(),
           fov_deg: float | None = None) -> np.ndarray:
    """Retina of ``bins`` angular cells over the field of view, bin 0 rightmost.

    Each landmark within range adds ``feature / (1 + distance)`` to the bin its
    bearing falls into.
    """
    visible, bins, dist = _visible(scene, pose, config, fov_deg)
    retina = np.zeros((config.bins, config.feature_dim))
    np.add.at(retina, bins[visible], scene.features[visible] / (1.0 + dist[visible, None]))
    return retina.reshape(-1)


# -- motion -------------------------------------------------------------------

def step(pose: Pose, action: str, profile: str = "eval",
         config: WorldConfig = WorldConfig()) -> Pose:
    if profile not in ACTION_PROFILES:
        raise InputError(f"unknown action profile {profile!r}")
    forward, turn_deg = ACTION_PROFILES[profile]
    if action == "forward":
        x = min(max(pose.x + forward * math.cos(pose.heading), 0.0), config.arena_width)
        y = min(max(pose.y + forward * math.sin(pose.heading), 0.0), config.arena_height)
        return Pose(x, y, pose.heading)
    if action == "left":
        return Pose(pose.x, pose.y, pose.heading + math.radians(turn_deg))
    if action == "right":
        return Pose(pose.x, pose.y, pose.heading - math.radians(turn_deg))
    raise InputError(f"unknown action {action!r}; expected one of {ACTIONS}")


def greedy_action(pose: Pose, goal: tuple[float, float], profile: str) -> str:
    """Turn toward the goal while misaligned by more than half a turn, else advance."""
    turn = math.radians(ACTION_PROFILES[profile][1])
    delta = wrap_angle(math.atan2(goal[1] - pose.y, goal[0] - pose.x) - pose.heading)
    if abs(delta) > turn / 2:
        return "left" if delta > 0 else "right"
    return "forward"


def ego_delta(a: Pose, b: Pose) -> np.ndarray:
    """Motion a -> b in a's frame as (dx, dy, cos dtheta, sin dtheta)."""
    dx, dy = b.x - a.x, b.y - a.y
    c, s = math.cos(a.heading), math.sin(a.heading)
    dth = b.heading - a.heading
    return np.array([c * dx + s * dy, -s * dx + c * dy, math.cos(dth), math.sin(dth)])


def compose(pose: Pose, delta: np.ndarray) -> Pose:
    """Apply an egocentric motion ``delta`` (as produced by :func:`ego_delta`)."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    return Pose(pose.x + c * delta[0] - s * delta[1], pose.y + s * delta[0] + c * delta[1],
                pose.heading + math.atan2(delta[3], delta[2]))


def relpose(agent: Pose, goal: Pose) -> RelPose:
    d = ego_delta(agent, goal)
    return RelPose(float(math.hypot(d[0], d[1])), float(math.atan2(d[1], d[0])),
                   (float(d[2]), float(d[3])))


# -- episodes -------------------------------------------------------------------

def _sample_goal(rng: np.random.Generator, pose: Pose, config: WorldConfig) -> tuple[float, float]:
    m = config.goal_margin
    for _ in range(1000):
        g = (rng.uniform(m, config.arena_width - m), rng.uniform(m, config.arena_height - m))
        if math.hypot(g[0] - pose.x, g[1] - pose.y) >= config.min_goal_distance:
            return g
    return g


def perturb_pose(pose: Pose, rng: np.random.Generator, config: WorldConfig) -> Pose:
    off = config.alt_offset
    pan = math.radians(config.alt_pan_deg)
    x = min(max(pose.x + rng.uniform(-off, off), 0.0), config.arena_width)
    y = min(max(pose.y + rng.uniform(-off, off), 0.0), config.arena_height)
    return Pose(x, y, pose.heading + rng.uniform(-pan, pan))


def generate_episode(scene: Scene, seed: int, length: int, profile: str = "eval",
                     config: WorldConfig = WorldConfig()) -> EpisodeRecord:
    """Chain random goal pursuits and record ``length`` observations.

    With profile ``"train"`` the recorded steps are separated by a random
    number of actions in ``[1, max_interval]``; with ``"eval"`` every action
    is recorded.  The first observation is taken at the start pose.
    """
    if length < 1:
        raise InputError("episode length must be >= 1")
    if profile not in ACTION_PROFILES:
        raise InputError(f"unknown action profile {profile!r}")
    rng = rng_for(seed, "episode")
    alt_rng = rng_for(seed, "alt")
    noise_rng = rng_for(seed, "noise")
    forward = ACTION_PROFILES[profile][0]
    m = config.goal_margin
    pose = Pose(rng.uniform(m, config.arena_width - m), rng.uniform(m, config.arena_height - m),
                rng.uniform(-math.pi, math.pi))
    goal = _sample_goal(rng, pose, config)

    poses = [pose, pose]
    actions: list[list[str]] = [[]]
    goals = [goal]
    while len(poses) < length + 1:
        interval = int(rng.integers(1, config.max_interval + 1)) if profile == "train" else 1
        taken = []
        for _ in range(interval):
            if math.hypot(goal[0] - pose.x, goal[1] - pose.y) < forward:
                goal = _sample_goal(rng, pose, config)
            action = greedy_action(pose, goal, profile)
            pose = step(pose, action, profile, config)
            taken.append(action)
        poses.append(pose)
        actions.append(taken)
        goals.append(goal)

    retinas, odometry, alt_poses, alt_retinas = [], [], [], []
    for t in range(length):
        here = poses[t + 1]
        retinas.append(render(scene, here, config))
        odometry.append(ego_delta(poses[t], here))
        alt = perturb_pose(here, alt_rng, config)
        fov = alt_rng.uniform(60.0, 120.0) if config.fov_jitter else None
        alt_poses.append(alt.as_array())
        alt_retinas.append(render(scene, alt, config, fov_deg=fov))
    retinas = np.array(retinas)
    odometry = np.array(odometry)
    alt_retinas = np.array(alt_retinas)
    if config.retina_noise > 0:
        retinas = retinas + noise_rng.normal(0.0, config.retina_noise, retinas.shape)
        alt_retinas = alt_retinas + noise_rng.normal(0.0, config.retina_noise, alt_retinas.shape)
    if config.odometry_noise > 0:
        odometry = odometry + noise_rng.normal(0.0, config.odometry_noise, odometry.shape)
        odometry[0] = (0.0, 0.0, 1.0, 0.0)
    return EpisodeRecord(scene.id, profile, np.array([p.as_array() for p in poses]),
                         retinas, odometry, np.array(alt_poses), alt_retinas, actions, np.array(goals))


def pose_at(record: EpisodeRecord, i: int) -> Pose:
    return Pose(*record.poses[i])


def alt_pose_at(record: EpisodeRecord, t: int) -> Pose:
    return Pose(*record.alt_poses[t])


def generate_dataset(seed: int, episodes: int, length: int, profile: str = "train",
                     config: WorldConfig = WorldConfig(), episodes_per_scene: int = 8,
                     ) -> tuple[list[Scene], list[EpisodeRecord]]:
    """Scenes and episodes as a pure function of ``(seed, config)``."""
    config.validate()
    scenes: list[Scene] = []
    records: list[EpisodeRecord] = []
    for i in range(episodes):
        if i % episodes_per_scene == 0:
            s = len(scenes)
            scenes.append(make_scene(derive_seed(seed, "scene", s), config, scene_id=f"s{seed}-{s:05d}"))
        records.append(generate_episode(scenes[-1], derive_seed(seed, "episode", i), length, profile, config))
    return scenes, records


def with_overrides(config: WorldConfig, **kw) -> WorldConfig:
    return replace(config, **kw)
