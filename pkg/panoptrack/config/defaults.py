from typing import Dict, Final, Tuple

DESCRIPTION: Final[str] = (
    "panoramic multi-camera 3D multi-object tracking: "
    "simulate, track, train the motion model, and evaluate"
)

SEED_ENV_VAR: Final[str] = "PANOPTRACK_SEED"
DEFAULT_SEED: Final[int] = 0

# fusion
NMS_IOU: Final[float] = 0.1
SCORE_FLOOR: Final[float] = 0.0

# affinity
W_DEEP: Final[float] = 0.5
AFFINITY_R: Final[float] = 10.0

# tracker
MATCH_THRESHOLD: Final[float] = 0.5
START_SCORE: Final[float] = 0.8
CONTINUE_SCORE: Final[float] = 0.5
MAX_INACTIVE_FRAMES: Final[int] = 10
BACKDROP_FRAMES: Final[int] = 1
EMBED_MOMENTUM: Final[float] = 0.8
DUP_IOU2D_NEW: Final[float] = 0.7
DUP_IOU2D_BACKDROP: Final[float] = 0.3
DUP_IOU3D: Final[float] = 0.1
CAMERA_ID_STRIDE: Final[int] = 1_000_000

PIPELINES: Final[Tuple[str, ...]] = (
    "single_camera",
    "track_then_merge",
    "merge_then_track",
)
PIPELINE_ALIASES: Final[Dict[str, str]] = {
    "single": "single_camera",
    "track_merge": "track_then_merge",
    "merge_track": "merge_then_track",
}
MOTION_MODELS: Final[Tuple[str, ...]] = ("none", "kf3d", "lstm")

# kalman
KF_Q_POSITION: Final[float] = 0.01
KF_Q_VELOCITY: Final[float] = 0.1
KF_R_POSITION: Final[float] = 0.5
KF_R_THETA: Final[float] = 0.1
KF_P0_POSITION: Final[float] = 1.0
KF_P0_VELOCITY: Final[float] = 10.0
KF_R_EPS: Final[float] = 1e-3

# lstm
HIDDEN_SIZE: Final[int] = 128
PROJECTION_SIZE: Final[int] = 64
HISTORY_LENGTH: Final[int] = 5
FORGET_BIAS: Final[float] = 1.0
WEIGHTS_MAGIC: Final[bytes] = b"PNTW"
WEIGHTS_VERSION: Final[int] = 1

# training
WINDOW: Final[int] = 10
BATCH_SIZE: Final[int] = 128
EPOCHS: Final[int] = 100
W_LINEAR: Final[float] = 0.001
BEV_MATCH_THRESHOLD: Final[float] = 2.0
LEARNING_RATE: Final[float] = 1e-3
WEIGHT_DECAY: Final[float] = 1e-4
ADAM_BETAS: Final[Tuple[float, float]] = (0.9, 0.999)
ADAM_EPS: Final[float] = 1e-8
HUBER_DELTA: Final[float] = 1.0
VALIDATION_FRACTION: Final[float] = 0.1
LAMBDA_EMBED: Final[float] = 0.25

# metrics
N_POINTS: Final[int] = 40
BEV_GATE: Final[float] = 2.0
MATCHERS: Final[Tuple[str, ...]] = ("bev:2.0", "iou3d:0.3", "iou3d:0.5")

# simulator
EMBEDDING_DIM: Final[int] = 256

# detector presets: start score, continue score, backdrop frames, score floor
PRESETS: Final[Dict[str, Dict[str, float]]] = {
    "baseline": {
        "start_score": 0.8,
        "continue_score": 0.5,
        "backdrop_frames": 1,
        "score_floor": 0.0,
    },
    "detr3d": {
        "start_score": 0.1,
        "continue_score": 0.05,
        "backdrop_frames": 0,
        "score_floor": 0.05,
    },
    "bevformer": {
        "start_score": 0.2,
        "continue_score": 0.1,
        "backdrop_frames": 0,
        "score_floor": 0.05,
    },
}

# file names
DETECTIONS_FILE: Final[str] = "detections.jsonl"
POSES_FILE: Final[str] = "poses.jsonl"
GT_FILE: Final[str] = "gt.jsonl"
RESULT_FILE: Final[str] = "result.jsonl"
MANIFEST_SUFFIX: Final[str] = ".manifest"

LOG_CONSOLE_FORMAT: Final[str] = "[%(levelname)s] %(message)s"
LOG_DATE_FORMAT: Final[str] = "%Y-%m-%d %H:%M:%S"
LOG_FILE_FORMAT: Final[str] = "%(asctime)s [%(levelname)s] %(message)s"
