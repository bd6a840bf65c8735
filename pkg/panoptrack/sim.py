"""Deterministic multi-camera rig simulator.

Objects follow world-frame paths around an ego vehicle whose cameras all sit
at the ego origin. Every random draw for one detection comes from a
generator keyed by (seed, frame, camera, object), so any frame can be
generated alone and in any order.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from logging import Logger, getLogger
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from fs.base import FS

from panoptrack.config.defaults import DEFAULT_SEED, EMBEDDING_DIM
from panoptrack.config.settings import read_toml, table_to_dataclass
from panoptrack.fusion import DetectionRecord, FrameBundle
from panoptrack.geom import Box3D, RigidTransform, transform_box, wrap_angle
from panoptrack.metrics import GroundTruth, GroundTruthObject
from panoptrack.utils.errors import ConfigError

LATENT_STREAM = 0x5EED
MIN_DIM_FRACTION = 0.1
EDGE_TOLERANCE = 1e-9
PATH_KINDS = ("constant_velocity", "constant_turn", "waypoints")


@dataclass(frozen=True)
class CameraSpec:
    camera_id: int
    yaw: float
    half_fov: float
    max_range: float = 60.0

    def __post_init__(self) -> None:
        if not 0.0 < self.half_fov < math.pi:
            raise ValueError(f"camera {self.camera_id}: half_fov outside (0, pi)")
        if self.max_range <= 0.0:
            raise ValueError(f"camera {self.camera_id}: max_range must be positive")

    def azimuth(self, camera_box: Box3D) -> float:
        """Bearing of the box center in the camera frame.

        Bearings within ``EDGE_TOLERANCE`` of a wedge edge snap onto it, so two
        cameras sharing an edge agree on which one owns a center lying on it.
        """
        azimuth = math.atan2(camera_box.y, camera_box.x)
        if abs(azimuth - self.half_fov) < EDGE_TOLERANCE:
            return self.half_fov
        if abs(azimuth + self.half_fov) < EDGE_TOLERANCE:
            return -self.half_fov
        return azimuth

    def sees(self, camera_box: Box3D) -> bool:
        azimuth = self.azimuth(camera_box)
        distance = math.hypot(camera_box.x, camera_box.y)
        return -self.half_fov <= azimuth < self.half_fov and distance <= self.max_range


@dataclass(frozen=True)
class RigSpec:
    name: str
    cameras: Tuple[CameraSpec, ...]

    def __post_init__(self) -> None:
        ids = [c.camera_id for c in self.cameras]
        if not ids:
            raise ValueError(f"rig {self.name} has no cameras")
        if len(set(ids)) != len(ids):
            raise ValueError(f"rig {self.name} repeats a camera id")


@dataclass(frozen=True)
class NoiseModel:
    sigma0: float = 0.05
    range_slope: float = 0.01
    sigma_theta: float = 0.02
    sigma_dim: float = 0.05
    dropout: float = 0.0
    truncation_margin: float = 0.05
    truncation_scale: float = 1.5
    truncation_penalty: float = 0.1

    def __post_init__(self) -> None:
        for name in ("sigma0", "range_slope", "sigma_theta", "sigma_dim", "truncation_margin"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must not be negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout outside [0, 1): {self.dropout}")
        if self.truncation_scale < 1.0:
            raise ValueError("truncation_scale must be at least 1")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    def sigma(self, distance: float) -> float:
        return self.sigma0 + self.range_slope * distance


@dataclass(frozen=True)
class EgoSpec:
    start: Tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0
    turn_rate: float = 0.0


@dataclass(frozen=True)
class ObjectSpec:
    category: str = "car"
    dims: Tuple[float, float, float] = (4.5, 1.9, 1.6)
    path: str = "constant_velocity"
    start: Tuple[float, float, float] = (10.0, 0.0, 0.8)
    heading: float = 0.0
    speed: float = 0.0
    turn_rate: float = 0.0
    waypoints: Tuple[Tuple[float, float], ...] = ()
    start_frame: int = 0
    end_frame: Optional[int] = None
    hidden_frames: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.path not in PATH_KINDS:
            raise ValueError(f"unknown path kind: {self.path}")
        if self.path == "waypoints" and len(self.waypoints) < 2:
            raise ValueError("a waypoint path needs at least two points")
        if any(d <= 0.0 for d in self.dims):
            raise ValueError(f"object dimensions must be positive: {self.dims}")

    def alive(self, frame: int) -> bool:
        return frame >= self.start_frame and (self.end_frame is None or frame < self.end_frame)

    def box(self, frame: int) -> Box3D:
        t = float(frame - self.start_frame)
        z = self.start[2]
        if self.path == "waypoints":
            x, y, heading = _along_waypoints(self.waypoints, self.speed * t)
        else:
            turn = self.turn_rate if self.path == "constant_turn" else 0.0
            x, y, heading = _turning_path(self.start[:2], self.heading, self.speed, turn, t)
        return Box3D(x, y, z, heading, *self.dims)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    frames: int
    objects: Tuple[ObjectSpec, ...]
    rig: str = "surround6"
    frame_rate: float = 2.0
    ego: EgoSpec = EgoSpec()
    noise: NoiseModel = NoiseModel()
    embedding_sigma: float = 0.0
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.frames < 1:
            raise ValueError("a scenario needs at least one frame")
        if self.frame_rate <= 0.0:
            raise ValueError("frame_rate must be positive")
        if self.embedding_sigma < 0.0:
            raise ValueError("embedding_sigma must not be negative")
        if self.seed < 0:
            raise ValueError("seed must not be negative")


def _turning_path(
    start: Sequence[float], heading: float, speed: float, turn_rate: float, t: float
) -> Tuple[float, float, float]:
    if turn_rate == 0.0:
        return (
            start[0] + speed * t * math.cos(heading),
            start[1] + speed * t * math.sin(heading),
            heading,
        )
    end_heading = heading + turn_rate * t
    radius = speed / turn_rate
    return (
        start[0] + radius * (math.sin(end_heading) - math.sin(heading)),
        start[1] - radius * (math.cos(end_heading) - math.cos(heading)),
        end_heading,
    )


def _along_waypoints(
    points: Sequence[Sequence[float]], distance: float
) -> Tuple[float, float, float]:
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        length = math.hypot(x1 - x0, y1 - y0)
        heading = math.atan2(y1 - y0, x1 - x0)
        if distance <= length:
            fraction = distance / length if length else 0.0
            return x0 + fraction * (x1 - x0), y0 + fraction * (y1 - y0), heading
        distance -= length
    # Parked at the last waypoint.
    return float(points[-1][0]), float(points[-1][1]), heading


def ego_pose(ego: EgoSpec, frame: int) -> RigidTransform:
    x, y, heading = _turning_path(ego.start, ego.heading, ego.speed, ego.turn_rate, frame)
    return RigidTransform.from_yaw(heading, (x, y, 0.0))


def camera_pose(ego: RigidTransform, camera: CameraSpec) -> RigidTransform:
    return ego.compose(RigidTransform.from_yaw(camera.yaw))


def keyed_generator(seed: int, frame: int, camera_id: int, object_id: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, frame, camera_id + 1, object_id]))
    )


def latent_embedding(seed: int, object_id: int, dim: int = EMBEDDING_DIM) -> np.ndarray:
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, LATENT_STREAM, object_id]))
    )
    latent = rng.standard_normal(dim)
    return latent / np.linalg.norm(latent)


def _noisy_detection(
    truth: Box3D,
    camera: CameraSpec,
    frame: int,
    object_id: int,
    category: str,
    scenario: ScenarioSpec,
    latent: np.ndarray,
) -> Optional[DetectionRecord]:
    noise = scenario.noise
    rng = keyed_generator(scenario.seed, frame, camera.camera_id, object_id)
    # Draw order is fixed so every key always consumes the same stream.
    keep = rng.random() >= noise.dropout
    unit_center = rng.standard_normal(3)
    unit_theta = rng.standard_normal()
    unit_dims = rng.standard_normal(3)
    unit_embedding = rng.standard_normal(latent.shape[0])
    if not keep:
        return None

    distance = math.hypot(truth.x, truth.y)
    sigma = noise.sigma(distance)
    azimuth = camera.azimuth(truth)
    truncated = camera.half_fov - abs(azimuth) < noise.truncation_margin
    scale = noise.truncation_scale if truncated else 1.0
    center_noise = unit_center * sigma * scale
    dims = np.array([truth.l, truth.w, truth.h])
    noisy_dims = np.maximum(
        dims + unit_dims * noise.sigma_dim * scale, MIN_DIM_FRACTION * dims
    )
    box = Box3D(
        truth.x + center_noise[0],
        truth.y + center_noise[1],
        truth.z + center_noise[2],
        truth.theta + unit_theta * noise.sigma_theta * scale,
        *noisy_dims,
    )

    spread = float(np.linalg.norm(center_noise)) / (3.0 * sigma) if sigma > 0.0 else 0.0
    confidence = 1.0 - 0.3 * spread - noise.truncation_penalty * float(truncated)
    confidence = min(max(confidence, 0.05), 1.0)

    embedding = latent + scenario.embedding_sigma * unit_embedding
    embedding = embedding / np.linalg.norm(embedding)
    return DetectionRecord(
        box=box,
        confidence=confidence,
        camera_id=camera.camera_id,
        frame=frame,
        category=category,
        embedding=embedding,
    )


def generate_frame(
    scenario: ScenarioSpec,
    rig: RigSpec,
    frame: int,
    latents: Optional[Dict[int, np.ndarray]] = None,
) -> Tuple[List[GroundTruthObject], FrameBundle]:
    latents = latents or {
        i: latent_embedding(scenario.seed, i) for i in range(len(scenario.objects))
    }
    ego = ego_pose(scenario.ego, frame)
    poses = {c.camera_id: camera_pose(ego, c) for c in rig.cameras}
    inverses = {c.camera_id: poses[c.camera_id].inverse() for c in rig.cameras}
    detections: Dict[int, List[DetectionRecord]] = {c.camera_id: [] for c in rig.cameras}
    truths: List[GroundTruthObject] = []

    for object_id, obj in enumerate(scenario.objects):
        if not obj.alive(frame):
            continue
        world_box = obj.box(frame)
        visible = False
        for camera in rig.cameras:
            camera_box = transform_box(world_box, inverses[camera.camera_id])
            if not camera.sees(camera_box):
                continue
            visible = True
            if frame in obj.hidden_frames:
                continue
            detection = _noisy_detection(
                camera_box, camera, frame, object_id, obj.category, scenario, latents[object_id]
            )
            if detection is not None:
                detections[camera.camera_id].append(detection)
        if visible:
            truths.append(GroundTruthObject(object_id, world_box, obj.category))

    return truths, FrameBundle(frame=frame, detections=detections, poses=poses)


def generate(
    scenario: ScenarioSpec,
    rig: RigSpec,
    jobs: int = 1,
    logger: Optional[Logger] = None,
) -> Tuple[GroundTruth, List[FrameBundle]]:
    logger = logger or getLogger("panoptrack")
    latents = {i: latent_embedding(scenario.seed, i) for i in range(len(scenario.objects))}

    def one(frame: int) -> Tuple[List[GroundTruthObject], FrameBundle]:
        return generate_frame(scenario, rig, frame, latents)

    frames = range(scenario.frames)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(one, frames))
    else:
        outputs = [one(frame) for frame in frames]

    gt = GroundTruth()
    bundles: List[FrameBundle] = []
    for frame, (truths, bundle) in zip(frames, outputs):
        gt.add(frame, truths)
        bundles.append(bundle)
    total = sum(len(d) for b in bundles for d in b.detections.values())
    logger.info(
        f"simulated {scenario.name} on rig {rig.name}: {scenario.frames} frames, "
        f"{len(scenario.objects)} objects, {total} detections"
    )
    return gt, bundles


# --------------------------------------------------------------------------
# built-in rigs and scenarios


def _degrees(value: float) -> float:
    return math.radians(value)


def builtin_rigs() -> Dict[str, RigSpec]:
    return {
        "pair_adjacent": RigSpec(
            "pair_adjacent",
            (
                CameraSpec(0, _degrees(-30.0), _degrees(30.0), 60.0),
                CameraSpec(1, _degrees(30.0), _degrees(30.0), 60.0),
            ),
        ),
        "pair_overlap": RigSpec(
            "pair_overlap",
            (
                CameraSpec(0, _degrees(-20.0), _degrees(35.0), 60.0),
                CameraSpec(1, _degrees(20.0), _degrees(35.0), 60.0),
            ),
        ),
        "surround6": RigSpec(
            "surround6",
            tuple(
                CameraSpec(k, wrap_angle(_degrees(60.0 * k)), _degrees(35.0), 50.0)
                for k in range(6)
            ),
        ),
    }


def _training_objects(count: int, length: int, seed: int) -> Tuple[ObjectSpec, ...]:
    rng = np.random.default_rng(seed)
    objects = []
    for i in range(count):
        bearing = rng.uniform(-math.pi, math.pi)
        distance = rng.uniform(8.0, 35.0)
        objects.append(
            ObjectSpec(
                category="car",
                start=(distance * math.cos(bearing), distance * math.sin(bearing), 0.8),
                heading=rng.uniform(-math.pi, math.pi),
                speed=rng.uniform(0.2, 1.2),
                start_frame=i,
                end_frame=i + length,
            )
        )
    return tuple(objects)


def builtin_scenarios() -> Dict[str, ScenarioSpec]:
    moderate = NoiseModel()
    crossing = ScenarioSpec(
        name="boundary_crossing",
        frames=32,
        rig="pair_adjacent",
        objects=(
            ObjectSpec(start=(20.0, -7.75, 0.8), heading=math.pi / 2, speed=0.5),
        ),
        noise=moderate,
        embedding_sigma=0.02,
        seed=11,
    )
    duplicate = ScenarioSpec(
        name="overlap_duplicate",
        frames=30,
        rig="pair_overlap",
        objects=(
            ObjectSpec(start=(18.0, -3.0, 0.8), heading=math.pi / 2, speed=0.2),
            ObjectSpec(start=(30.0, 4.0, 0.8), heading=-math.pi / 2, speed=0.25),
        ),
        noise=moderate,
        embedding_sigma=0.02,
        seed=12,
    )
    occlusion = ScenarioSpec(
        name="occlusion_gap",
        frames=24,
        rig="surround6",
        objects=(
            ObjectSpec(
                start=(15.0, 4.0, 0.8),
                heading=0.3,
                speed=0.6,
                hidden_frames=(10, 11, 12),
            ),
        ),
        noise=moderate,
        embedding_sigma=0.02,
        seed=13,
    )
    crowd = ScenarioSpec(
        name="crowd",
        frames=40,
        rig="surround6",
        ego=EgoSpec(speed=0.2),
        objects=(
            # Two near-passes: pairs on crossing lanes passing about 3.5 m apart.
            ObjectSpec(start=(12.0, -10.0, 0.8), heading=math.pi / 2, speed=0.5),
            ObjectSpec(start=(2.0, 3.5, 0.8), heading=0.0, speed=0.5),
            ObjectSpec(start=(-14.0, 10.0, 0.8), heading=-math.pi / 2, speed=0.5),
            ObjectSpec(start=(-24.0, -3.5, 0.8), heading=0.0, speed=0.5),
            ObjectSpec(
                category="pedestrian",
                dims=(0.8, 0.7, 1.75),
                start=(6.0, 12.0, 0.9),
                heading=0.0,
                speed=0.3,
            ),
            ObjectSpec(
                path="constant_turn",
                start=(25.0, 0.0, 0.8),
                heading=math.pi / 2,
                speed=0.7,
                turn_rate=0.04,
            ),
            ObjectSpec(
                path="waypoints",
                waypoints=((-10.0, -20.0), (0.0, -15.0), (20.0, -15.0)),
                speed=0.6,
            ),
            ObjectSpec(start=(30.0, 20.0, 0.8), heading=math.pi, speed=0.4),
        ),
        noise=moderate,
        embedding_sigma=0.03,
        seed=14,
    )
    train = ScenarioSpec(
        name="constant_velocity_train",
        frames=216,
        rig="surround6",
        objects=_training_objects(200, 16, seed=15),
        noise=replace(moderate, dropout=0.1),
        embedding_sigma=0.03,
        seed=15,
    )
    return {s.name: s for s in (crossing, duplicate, occlusion, crowd, train)}


# --------------------------------------------------------------------------
# TOML loading


def rig_from_table(table: Dict[str, object], name: str = "custom") -> RigSpec:
    table = dict(table)
    cameras = table.pop("cameras", None)
    if not cameras:
        raise ConfigError("cameras", "a rig needs at least one [[cameras]] entry")
    rig_name = table.pop("name", name)
    if table:
        raise ConfigError(sorted(table)[0], "unknown rig key")
    try:
        specs = tuple(
            table_to_dataclass(CameraSpec, camera, f"cameras[{i}]")
            for i, camera in enumerate(cameras)
        )
        return RigSpec(str(rig_name), specs)
    except ValueError as error:
        raise ConfigError("cameras", str(error)) from None


def scenario_from_table(table: Dict[str, object], name: str = "custom") -> ScenarioSpec:
    table = dict(table)
    try:
        objects = tuple(
            table_to_dataclass(ObjectSpec, obj, f"objects[{i}]")
            for i, obj in enumerate(table.pop("objects", []))
        )
        ego = table_to_dataclass(EgoSpec, table.pop("ego", {}), "ego")
        noise = table_to_dataclass(NoiseModel, table.pop("noise", {}), "noise")
        table.setdefault("name", name)
        return table_to_dataclass(
            ScenarioSpec, {**table, "objects": objects, "ego": ego, "noise": noise}, "scenario"
        )
    except ValueError as error:
        raise ConfigError("scenario", str(error)) from None


def load_rig(source: str, filesystem: Optional[FS] = None) -> RigSpec:
    """Resolve ``builtin:<name>``, a bare built-in name, or a TOML file."""
    rigs = builtin_rigs()
    name = source.split(":", 1)[1] if source.startswith("builtin:") else source
    if name in rigs:
        return rigs[name]
    if filesystem is None:
        raise ConfigError("rig", f"unknown built-in rig: {name}")
    return rig_from_table(read_toml(filesystem, source), name=source)


def load_scenario(source: str, filesystem: Optional[FS] = None) -> ScenarioSpec:
    scenarios = builtin_scenarios()
    name = source.split(":", 1)[1] if source.startswith("builtin:") else source
    if name in scenarios:
        return scenarios[name]
    if source.startswith("builtin:") or filesystem is None:
        raise ConfigError("scenario", f"unknown built-in scenario: {name}")
    return scenario_from_table(read_toml(filesystem, source), name=source)
