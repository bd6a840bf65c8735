from dataclasses import dataclass, field
from enum import Enum
from logging import Logger, getLogger
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from panoptrack.affinity import AffinityConfig, AffinityMatrix, TrackCue, combined_affinity
from panoptrack.config.defaults import (
    BACKDROP_FRAMES,
    CAMERA_ID_STRIDE,
    CONTINUE_SCORE,
    DUP_IOU2D_BACKDROP,
    DUP_IOU2D_NEW,
    DUP_IOU3D,
    EMBED_MOMENTUM,
    MATCH_THRESHOLD,
    MAX_INACTIVE_FRAMES,
    PIPELINES,
    START_SCORE,
)
from panoptrack.fusion import (
    DetectionRecord,
    FusionConfig,
    FrameBundle,
    filter_by_score,
    lift_detections,
    merge_detections,
    nms_3d,
)
from panoptrack.geom import Box3D, iou_2d, iou_3d
from panoptrack.motion import MotionModel, NoMotion
from panoptrack.utils.errors import FrameMismatchError, FrameOrderError, MissingPoseError


class TrackStatus(Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"
    DEAD = "dead"


@dataclass(frozen=True)
class TrackerConfig:
    match_threshold: float = MATCH_THRESHOLD
    start_score: float = START_SCORE
    continue_score: float = CONTINUE_SCORE
    max_inactive_frames: int = MAX_INACTIVE_FRAMES
    backdrop_frames: int = BACKDROP_FRAMES
    embed_momentum: float = EMBED_MOMENTUM
    dup_iou2d_new: float = DUP_IOU2D_NEW
    dup_iou2d_backdrop: float = DUP_IOU2D_BACKDROP
    dup_iou3d: float = DUP_IOU3D
    pipeline: str = "merge_then_track"
    motion_model: str = "none"

    def __post_init__(self) -> None:
        for name in (
            "match_threshold",
            "start_score",
            "continue_score",
            "embed_momentum",
            "dup_iou2d_new",
            "dup_iou2d_backdrop",
            "dup_iou3d",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} outside [0, 1]: {value}")
        if self.max_inactive_frames < 1:
            raise ValueError("max_inactive_frames must be at least 1")
        if self.backdrop_frames < 0:
            raise ValueError("backdrop_frames must not be negative")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline: {self.pipeline}")


@dataclass(frozen=True)
class TrackState:
    frame: int
    embedding: Optional[np.ndarray]
    box: Box3D
    confidence: float


@dataclass
class Track:
    track_id: int
    category: str
    box: Box3D
    confidence: float
    embedding: Optional[np.ndarray]
    motion_state: object
    camera_id: int
    history: List[TrackState] = field(default_factory=list)
    status: TrackStatus = TrackStatus.ACTIVE
    frames_since_update: int = 0
    predicted_box: Optional[Box3D] = None

    def cue(self) -> TrackCue:
        return TrackCue(
            track_id=self.track_id,
            category=self.category,
            embedding=self.embedding,
            previous_box=self.box,
            predicted_box=self.predicted_box if self.predicted_box is not None else self.box,
        )


@dataclass(frozen=True)
class TrackOutput:
    track_id: int
    box: Box3D
    confidence: float
    category: str
    camera_id: int = 0


@dataclass(frozen=True)
class Backdrop:
    detection: DetectionRecord
    expires: int


@dataclass
class TrackingResult:
    frames: Dict[int, List[TrackOutput]] = field(default_factory=dict)

    def add(self, frame: int, outputs: Sequence[TrackOutput]) -> None:
        self.frames[frame] = sorted(outputs, key=lambda o: o.track_id)

    @property
    def track_ids(self) -> List[int]:
        return sorted({o.track_id for outputs in self.frames.values() for o in outputs})


@dataclass(frozen=True)
class Assignment:
    pairs: List[Tuple[int, int]]
    unmatched_tracks: List[int]
    unmatched_detections: List[int]


def greedy_assign(affinity: AffinityMatrix, threshold: float) -> Assignment:
    """Commit the best remaining pair until none reaches the threshold.

    Pairs are ranked by value, then lower track id, then lower detection
    index. Returned pairs are (track_id, detection_index).
    """
    values = affinity.values
    n_tracks, n_dets = values.shape
    candidates = [
        (-float(values[r, c]), affinity.track_ids[r], affinity.detection_indices[c], r, c)
        for r in range(n_tracks)
        for c in range(n_dets)
        if values[r, c] >= threshold
    ]
    candidates.sort()
    used_rows, used_cols = set(), set()
    pairs: List[Tuple[int, int]] = []
    for _, track_id, det_index, r, c in candidates:
        if r in used_rows or c in used_cols:
            continue
        used_rows.add(r)
        used_cols.add(c)
        pairs.append((track_id, det_index))
    return Assignment(
        pairs=pairs,
        unmatched_tracks=[t for r, t in enumerate(affinity.track_ids) if r not in used_rows],
        unmatched_detections=[
            d for c, d in enumerate(affinity.detection_indices) if c not in used_cols
        ],
    )


def _normalize(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


class Tracker:
    """Association, lifecycle and duplicate handling for one stream of detections."""

    def __init__(
        self,
        config: TrackerConfig = TrackerConfig(),
        affinity: AffinityConfig = AffinityConfig(),
        motion: Optional[MotionModel] = None,
        first_id: int = 0,
        logger: Optional[Logger] = None,
    ) -> None:
        self.config = config
        self.affinity = affinity
        self.motion = motion or NoMotion()
        self.next_id = first_id
        self.logger = logger or getLogger("panoptrack")
        self.tracks: List[Track] = []
        self.backdrops: List[Backdrop] = []
        self.frame: Optional[int] = None

    @property
    def live_tracks(self) -> List[Track]:
        return [t for t in self.tracks if t.status is not TrackStatus.DEAD]

    def _predict(self) -> None:
        for track in self.live_tracks:
            track.predicted_box, track.motion_state = self.motion.predict(
                track.motion_state, track.box
            )

    def _is_duplicate(
        self,
        detection: DetectionRecord,
        anchors: Sequence[DetectionRecord],
        iou2d_threshold: float,
    ) -> bool:
        for anchor in anchors:
            if detection.box_2d is not None and anchor.box_2d is not None:
                if anchor.camera_id != detection.camera_id:
                    continue
                if iou_2d(detection.box_2d, anchor.box_2d) >= iou2d_threshold:
                    return True
            elif iou_3d(detection.box, anchor.box) >= self.config.dup_iou3d:
                return True
        return False

    def _match(self, track: Track, detection: DetectionRecord, frame: int) -> None:
        refined, track.motion_state = self.motion.correct(
            track.motion_state,
            track.box,
            track.predicted_box if track.predicted_box is not None else track.box,
            detection.box,
            detection.confidence,
        )
        if detection.embedding is not None:
            if track.embedding is None:
                track.embedding = np.array(detection.embedding)
            else:
                momentum = self.config.embed_momentum
                track.embedding = _normalize(
                    momentum * track.embedding + (1.0 - momentum) * detection.embedding
                )
        track.box = refined
        track.confidence = detection.confidence
        track.camera_id = detection.camera_id
        track.status = TrackStatus.ACTIVE
        track.frames_since_update = 0
        track.history.append(TrackState(frame, track.embedding, refined, detection.confidence))

    def _miss(self, track: Track) -> None:
        predicted = track.predicted_box if track.predicted_box is not None else track.box
        track.motion_state = self.motion.coast(track.motion_state, predicted)
        track.box = predicted
        track.frames_since_update += 1
        track.status = (
            TrackStatus.DEAD
            if track.frames_since_update > self.config.max_inactive_frames
            else TrackStatus.INACTIVE
        )

    def _spawn(self, detection: DetectionRecord, frame: int) -> Track:
        embedding = None if detection.embedding is None else np.array(detection.embedding)
        track = Track(
            track_id=self.next_id,
            category=detection.category,
            box=detection.box,
            confidence=detection.confidence,
            embedding=embedding,
            motion_state=self.motion.start(detection.box),
            camera_id=detection.camera_id,
        )
        track.history.append(TrackState(frame, embedding, detection.box, detection.confidence))
        self.next_id += 1
        self.tracks.append(track)
        return track

    def step(self, frame: int, detections: Sequence[DetectionRecord]) -> List[TrackOutput]:
        if self.frame is not None and frame <= self.frame:
            raise FrameOrderError(previous=self.frame, current=frame)
        for detection in detections:
            if detection.frame != frame:
                raise FrameMismatchError(expected=frame, got=detection.frame)
        self.frame = frame
        config = self.config

        self._predict()
        live = self.live_tracks
        candidates = [d for d in detections if d.confidence >= config.continue_score]
        affinity = combined_affinity(
            [t.cue() for t in live], candidates, self.affinity, logger=self.logger
        )
        assignment = greedy_assign(affinity, config.match_threshold)

        by_id = {t.track_id: t for t in live}
        matched: List[DetectionRecord] = []
        for track_id, index in assignment.pairs:
            self._match(by_id[track_id], candidates[index], frame)
            matched.append(candidates[index])
        for track_id in assignment.unmatched_tracks:
            self._miss(by_id[track_id])

        self.backdrops = [b for b in self.backdrops if b.expires >= frame]
        backdrop_anchors = [b.detection for b in self.backdrops]
        new_backdrops: List[Backdrop] = []
        unmatched = sorted(
            (candidates[i] for i in assignment.unmatched_detections),
            key=lambda d: -d.confidence,
        )
        spawned = 0
        for detection in unmatched:
            if detection.confidence >= config.start_score and not (
                self._is_duplicate(detection, matched, config.dup_iou2d_new)
                or self._is_duplicate(detection, backdrop_anchors, config.dup_iou2d_backdrop)
            ):
                self._spawn(detection, frame)
                matched.append(detection)
                spawned += 1
            elif config.backdrop_frames > 0:
                new_backdrops.append(Backdrop(detection, frame + config.backdrop_frames))
        self.backdrops.extend(new_backdrops)

        outputs = [
            TrackOutput(t.track_id, t.box, t.confidence, t.category, t.camera_id)
            for t in self.tracks
            if t.status is TrackStatus.ACTIVE
        ]
        self.tracks = self.live_tracks
        self.logger.debug(
            f"frame {frame}: {len(assignment.pairs)} matched, {spawned} spawned, "
            f"{len(live) - len(assignment.pairs)} unmatched tracks, "
            f"{len(new_backdrops)} backdrops"
        )
        return outputs


def _camera_ids(bundles: Sequence[FrameBundle]) -> List[int]:
    return sorted({c for bundle in bundles for c in bundle.camera_ids})


def _check_order(bundles: Sequence[FrameBundle]) -> None:
    for previous, current in zip(bundles, bundles[1:]):
        if current.frame <= previous.frame:
            raise FrameOrderError(previous=previous.frame, current=current.frame)


def _camera_detections(
    bundle: FrameBundle, camera_id: int, fusion: FusionConfig
) -> List[DetectionRecord]:
    detections = bundle.detections.get(camera_id, [])
    if not detections:
        return []
    try:
        pose = bundle.poses[camera_id]
    except KeyError:
        raise MissingPoseError(camera_id=camera_id, frame=bundle.frame) from None
    lifted = filter_by_score(lift_detections(detections, pose), fusion.score_floor)
    return nms_3d(lifted, fusion.nms_iou, fusion.category_aware)


def _output_as_detection(output: TrackOutput, frame: int) -> DetectionRecord:
    return DetectionRecord(
        box=output.box,
        confidence=output.confidence,
        camera_id=output.camera_id,
        frame=frame,
        category=output.category,
    )


def run_pipeline(
    bundles: Sequence[FrameBundle],
    config: TrackerConfig = TrackerConfig(),
    affinity: AffinityConfig = AffinityConfig(),
    fusion: FusionConfig = FusionConfig(),
    motion: Optional[MotionModel] = None,
    logger: Optional[Logger] = None,
) -> TrackingResult:
    logger = logger or getLogger("panoptrack")
    motion = motion or NoMotion()
    _check_order(bundles)
    result = TrackingResult()

    if config.pipeline == "merge_then_track":
        tracker = Tracker(config, affinity, motion, logger=logger)
        for bundle in bundles:
            detections = merge_detections(
                bundle,
                iou_threshold=fusion.nms_iou,
                category_aware=fusion.category_aware,
                score_floor=fusion.score_floor,
                logger=logger,
            )
            result.add(bundle.frame, tracker.step(bundle.frame, detections))
        return result

    cameras = _camera_ids(bundles)
    trackers = {
        c: Tracker(config, affinity, motion, first_id=c * CAMERA_ID_STRIDE, logger=logger)
        for c in cameras
    }
    for bundle in bundles:
        outputs: List[TrackOutput] = []
        for camera_id in cameras:
            detections = _camera_detections(bundle, camera_id, fusion)
            outputs.extend(trackers[camera_id].step(bundle.frame, detections))
        if config.pipeline == "track_then_merge":
            # Keep the identity of the most confident source track.
            as_detections = [_output_as_detection(o, bundle.frame) for o in outputs]
            survivors = nms_3d(as_detections, fusion.nms_iou, fusion.category_aware)
            keep = {id(d) for d in survivors}
            outputs = [o for o, d in zip(outputs, as_detections) if id(d) in keep]
        result.add(bundle.frame, outputs)
    logger.debug(f"{config.pipeline}: {len(trackers)} camera trackers")
    return result
