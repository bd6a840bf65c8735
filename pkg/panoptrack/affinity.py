"""Track-to-detection affinities: appearance, location, motion and their blend."""

from dataclasses import dataclass
from logging import Logger, getLogger
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from panoptrack.config.defaults import AFFINITY_R, W_DEEP
from panoptrack.fusion import DetectionRecord
from panoptrack.geom import Box3D, wrap_angles

THETA = 3


@dataclass(frozen=True)
class AffinityConfig:
    w_deep: float = W_DEEP
    r: float = AFFINITY_R
    clamp_cos: bool = False
    category_gating: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.w_deep <= 1.0:
            raise ValueError(f"w_deep outside [0, 1]: {self.w_deep}")
        if self.r <= 0.0:
            raise ValueError(f"r must be positive: {self.r}")


@dataclass(frozen=True)
class TrackCue:
    """What association needs to know about one track."""

    track_id: int
    category: str
    embedding: Optional[np.ndarray]
    previous_box: Box3D
    predicted_box: Box3D


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    track_ids: List[int]
    detection_indices: List[int]

    @property
    def shape(self):
        return self.values.shape


def _check_r(r: float) -> None:
    if r <= 0.0:
        raise ValueError(f"r must be positive: {r}")


def appearance_affinity(
    track_embeddings: Sequence[np.ndarray], det_embeddings: Sequence[np.ndarray]
) -> np.ndarray:
    if len(track_embeddings) == 0 or len(det_embeddings) == 0:
        return np.zeros((len(track_embeddings), len(det_embeddings)))
    scores = np.asarray(track_embeddings) @ np.asarray(det_embeddings).T
    over_detections = softmax(scores, axis=1)
    over_tracks = softmax(scores, axis=0)
    return 0.5 * (over_detections + over_tracks)


def _box_matrix(boxes: Sequence[Box3D]) -> np.ndarray:
    return np.array([b.to_array() for b in boxes], dtype=np.float64).reshape(-1, 7)


def location_affinity(
    predicted_boxes: Sequence[Box3D], det_boxes: Sequence[Box3D], r: float
) -> np.ndarray:
    _check_r(r)
    tracks, dets = _box_matrix(predicted_boxes), _box_matrix(det_boxes)
    diff = tracks[:, None, :] - dets[None, :, :]
    diff[..., THETA] = wrap_angles(diff[..., THETA])
    return np.exp(-np.abs(diff).sum(axis=-1) / r)


def motion_affinity(
    track_prev_centers: np.ndarray,
    track_pred_centers: np.ndarray,
    det_centers: np.ndarray,
    r: float,
    clamp_cos: bool = False,
) -> np.ndarray:
    _check_r(r)
    prev = np.asarray(track_prev_centers, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(track_pred_centers, dtype=np.float64).reshape(-1, 3)
    dets = np.asarray(det_centers, dtype=np.float64).reshape(-1, 3)
    v_track = (pred - prev)[:, None, :]
    v_det = dets[None, :, :] - prev[:, None, :]
    norms = np.linalg.norm(v_track, axis=-1) * np.linalg.norm(v_det, axis=-1)
    dots = (v_track * v_det).sum(axis=-1)
    # A zero-length motion vector has no heading: fall back to pure pseudo motion.
    w_cos = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0.0)
    if clamp_cos:
        w_cos = np.clip(w_cos, 0.0, 1.0)
    a_centroid = np.exp(
        -np.linalg.norm(pred[:, None, :] - dets[None, :, :], axis=-1) / r
    )
    a_pseudo = np.exp(-np.linalg.norm(v_track - v_det, axis=-1) / r)
    return w_cos * a_centroid + (1.0 - w_cos) * a_pseudo


def combined_affinity(
    tracks: Sequence[TrackCue],
    detections: Sequence[DetectionRecord],
    config: AffinityConfig = AffinityConfig(),
    logger: Optional[Logger] = None,
) -> AffinityMatrix:
    logger = logger or getLogger("panoptrack")
    n_tracks, n_dets = len(tracks), len(detections)
    track_ids = [t.track_id for t in tracks]
    indices = list(range(n_dets))
    if n_tracks == 0 or n_dets == 0:
        return AffinityMatrix(np.zeros((n_tracks, n_dets)), track_ids, indices)

    a_loc = location_affinity(
        [t.predicted_box for t in tracks], [d.box for d in detections], config.r
    )
    a_motion = motion_affinity(
        np.array([t.previous_box.center for t in tracks]),
        np.array([t.predicted_box.center for t in tracks]),
        np.array([d.box.center for d in detections]),
        config.r,
        clamp_cos=config.clamp_cos,
    )
    geometric = a_motion * a_loc

    w_deep = config.w_deep
    has_embeddings = all(t.embedding is not None for t in tracks) and all(
        d.embedding is not None for d in detections
    )
    if w_deep > 0.0 and not has_embeddings:
        logger.debug("missing embeddings: association uses geometry only")
        w_deep = 0.0
    if w_deep == 1.0:
        values = appearance_affinity(
            [t.embedding for t in tracks], [d.embedding for d in detections]
        )
    elif w_deep > 0.0:
        a_deep = appearance_affinity(
            [t.embedding for t in tracks], [d.embedding for d in detections]
        )
        values = w_deep * a_deep + (1.0 - w_deep) * geometric
    else:
        values = geometric

    if config.category_gating:
        same = np.array(
            [[t.category == d.category for d in detections] for t in tracks],
            dtype=bool,
        )
        values = np.where(same, values, -np.inf)
    return AffinityMatrix(values, track_ids, indices)
