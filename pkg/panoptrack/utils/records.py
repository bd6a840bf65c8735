"""JSON Lines codecs for detections, poses, ground truth and tracking results.

Every line holds one frame-scoped record. Floats are written with Python's
shortest round-trip representation so reading a file back gives the same
64-bit values.
"""

import json
from collections import defaultdict
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Sequence, Tuple

import numpy as np
from fs.base import FS
from fs.errors import ResourceNotFound

from panoptrack.fusion import DetectionRecord, FrameBundle
from panoptrack.geom import Box2D, Box3D, RigidTransform
from panoptrack.learn import TrajectorySample, TrajectoryStep
from panoptrack.metrics import GroundTruth, GroundTruthObject
from panoptrack.tracker import TrackingResult, TrackOutput
from panoptrack.utils.errors import PanoptrackError, RecordError


def dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def write_lines(fs: FS, path: str, records: Iterable[Mapping[str, Any]]) -> int:
    lines = [dumps(r) for r in records]
    fs.writetext(path, "".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_lines(fs: FS, path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield (line number, record), skipping blank lines."""
    try:
        text = fs.readtext(path, encoding="utf-8")
    except ResourceNotFound:
        raise RecordError(path, None, "file not found") from None
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as error:
            raise RecordError(path, number, f"malformed JSON: {error.msg}") from None
        if not isinstance(record, dict):
            raise RecordError(path, number, "expected a JSON object")
        yield number, record


def _decode(
    fs: FS, path: str, decoder: Callable[[Dict[str, Any]], Any]
) -> Iterator[Tuple[Dict[str, Any], Any]]:
    for number, record in read_lines(fs, path):
        try:
            yield record, decoder(record)
        except KeyError as error:
            raise RecordError(path, number, f"missing field {error}") from None
        except (TypeError, ValueError, PanoptrackError) as error:
            raise RecordError(path, number, str(error)) from None


def _box(values: Sequence[float]) -> Box3D:
    if not isinstance(values, list):
        raise ValueError("box must be a list of 7 numbers")
    return Box3D.from_array(values)


def _int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{name} must be an integer")
    return value


# --------------------------------------------------------------------------
# detections and poses


def detection_to_record(detection: DetectionRecord) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "frame": detection.frame,
        "camera_id": detection.camera_id,
        "category": detection.category,
        "box": list(detection.box.as_tuple()),
        "score": detection.confidence,
    }
    if detection.embedding is not None:
        record["embedding"] = detection.embedding.tolist()
    if detection.box_2d is not None:
        b = detection.box_2d
        record["box_2d"] = [b.x_min, b.y_min, b.x_max, b.y_max]
    return record


def record_to_detection(record: Dict[str, Any]) -> DetectionRecord:
    embedding = record.get("embedding")
    box_2d = record.get("box_2d")
    return DetectionRecord(
        box=_box(record["box"]),
        confidence=float(record["score"]),
        camera_id=_int(record["camera_id"], "camera_id"),
        frame=_int(record["frame"], "frame"),
        category=str(record["category"]),
        embedding=np.asarray(embedding, dtype=np.float64) if embedding is not None else None,
        box_2d=Box2D(*(float(v) for v in box_2d)) if box_2d is not None else None,
    )


def pose_to_record(frame: int, camera_id: int, pose: RigidTransform) -> Dict[str, Any]:
    return {
        "frame": frame,
        "camera_id": camera_id,
        "rotation": list(pose.rotation),
        "translation": list(pose.translation),
    }


def record_to_pose(record: Dict[str, Any]) -> Tuple[int, int, RigidTransform]:
    return (
        _int(record["frame"], "frame"),
        _int(record["camera_id"], "camera_id"),
        RigidTransform(
            rotation=tuple(float(v) for v in record["rotation"]),
            translation=tuple(float(v) for v in record["translation"]),
        ),
    )


def write_detections(fs: FS, path: str, bundles: Sequence[FrameBundle]) -> int:
    return write_lines(
        fs,
        path,
        (
            detection_to_record(d)
            for bundle in bundles
            for camera_id in sorted(bundle.detections)
            for d in bundle.detections[camera_id]
        ),
    )


def write_poses(fs: FS, path: str, bundles: Sequence[FrameBundle]) -> int:
    return write_lines(
        fs,
        path,
        (
            pose_to_record(bundle.frame, camera_id, bundle.poses[camera_id])
            for bundle in bundles
            for camera_id in sorted(bundle.poses)
        ),
    )


def read_detections(fs: FS, path: str) -> Dict[int, List[DetectionRecord]]:
    by_frame: Dict[int, List[DetectionRecord]] = defaultdict(list)
    for _, detection in _decode(fs, path, record_to_detection):
        by_frame[detection.frame].append(detection)
    return dict(by_frame)


def read_bundles(fs: FS, detections_path: str, poses_path: str) -> List[FrameBundle]:
    poses: Dict[int, Dict[int, RigidTransform]] = defaultdict(dict)
    for _, (frame, camera_id, pose) in _decode(fs, poses_path, record_to_pose):
        poses[frame][camera_id] = pose
    detections: Dict[int, Dict[int, List[DetectionRecord]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for frame, records in read_detections(fs, detections_path).items():
        for detection in records:
            detections[frame][detection.camera_id].append(detection)
    frames = sorted(set(poses) | set(detections))
    return [
        FrameBundle(
            frame=frame,
            detections={c: list(d) for c, d in detections.get(frame, {}).items()},
            poses=dict(poses.get(frame, {})),
        )
        for frame in frames
    ]


# --------------------------------------------------------------------------
# ground truth and results


def write_ground_truth(fs: FS, path: str, gt: GroundTruth) -> int:
    return write_lines(
        fs,
        path,
        (
            {
                "frame": frame,
                "object_id": o.object_id,
                "category": o.category,
                "box": list(o.box.as_tuple()),
            }
            for frame in sorted(gt.frames)
            for o in gt.frames[frame]
        ),
    )


def read_ground_truth(fs: FS, path: str) -> GroundTruth:
    def decode(record: Dict[str, Any]) -> Tuple[int, GroundTruthObject]:
        return _int(record["frame"], "frame"), GroundTruthObject(
            object_id=_int(record["object_id"], "object_id"),
            box=_box(record["box"]),
            category=str(record["category"]),
        )

    by_frame: Dict[int, List[GroundTruthObject]] = defaultdict(list)
    for _, (frame, obj) in _decode(fs, path, decode):
        by_frame[frame].append(obj)
    gt = GroundTruth()
    for frame in sorted(by_frame):
        gt.add(frame, by_frame[frame])
    return gt


def write_results(fs: FS, path: str, result: TrackingResult) -> int:
    return write_lines(
        fs,
        path,
        (
            {
                "frame": frame,
                "track_id": o.track_id,
                "category": o.category,
                "box": list(o.box.as_tuple()),
                "score": o.confidence,
            }
            for frame in sorted(result.frames)
            for o in result.frames[frame]
        ),
    )


def read_results(fs: FS, path: str) -> TrackingResult:
    def decode(record: Dict[str, Any]) -> Tuple[int, TrackOutput]:
        return _int(record["frame"], "frame"), TrackOutput(
            track_id=_int(record["track_id"], "track_id"),
            box=_box(record["box"]),
            confidence=float(record["score"]),
            category=str(record["category"]),
        )

    by_frame: Dict[int, List[TrackOutput]] = defaultdict(list)
    for _, (frame, output) in _decode(fs, path, decode):
        by_frame[frame].append(output)
    result = TrackingResult()
    for frame in sorted(by_frame):
        result.add(frame, by_frame[frame])
    return result


# --------------------------------------------------------------------------
# trajectory dataset


def sample_to_record(sample: TrajectorySample) -> Dict[str, Any]:
    return {
        "object_id": sample.object_id,
        "category": sample.category,
        "steps": [
            {
                "frame": s.frame,
                "truth": list(s.truth.as_tuple()),
                "detection": list(s.detection.as_tuple()) if s.matched else None,
                "score": s.confidence,
                "camera_id": s.camera_id,
            }
            for s in sample.steps
        ],
    }


def record_to_sample(record: Dict[str, Any]) -> TrajectorySample:
    steps = tuple(
        TrajectoryStep(
            frame=_int(step["frame"], "frame"),
            truth=_box(step["truth"]),
            detection=_box(step["detection"]) if step["detection"] is not None else None,
            confidence=float(step["score"]),
            camera_id=step["camera_id"],
        )
        for step in record["steps"]
    )
    if not any(s.matched for s in steps):
        raise ValueError("a trajectory window needs at least one matched detection")
    return TrajectorySample(
        object_id=_int(record["object_id"], "object_id"),
        category=str(record["category"]),
        steps=steps,
    )


def write_trajectories(fs: FS, path: str, samples: Sequence[TrajectorySample]) -> int:
    return write_lines(fs, path, (sample_to_record(s) for s in samples))


def read_trajectories(fs: FS, path: str) -> List[TrajectorySample]:
    return [sample for _, sample in _decode(fs, path, record_to_sample)]
