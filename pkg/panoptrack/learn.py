"""Motion-model training data, losses, and the trainer.

Training replays every trajectory window the way the tracker would run it:
the prediction network extrapolates a velocity from the last five refined
velocities, the refinement network corrects it whenever a detection was
matched at that step, and a gap keeps the prediction. Gradients flow back
through the whole window, including the velocity history and the observed
velocities, which depend on earlier refined states.
"""

from dataclasses import dataclass, field
from logging import Logger, getLogger
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from panoptrack.config.defaults import (
    ADAM_BETAS,
    ADAM_EPS,
    BATCH_SIZE,
    BEV_MATCH_THRESHOLD,
    EPOCHS,
    HISTORY_LENGTH,
    HUBER_DELTA,
    LAMBDA_EMBED,
    LEARNING_RATE,
    VALIDATION_FRACTION,
    W_LINEAR,
    WEIGHT_DECAY,
    WINDOW,
)
from panoptrack.fusion import DetectionRecord
from panoptrack.geom import Box3D, bev_distance, wrap_angles
from panoptrack.metrics import GroundTruth
from panoptrack.motion import (
    BOX_DIM,
    THETA,
    CellCache,
    LstmWeights,
    lstm_cell_backward,
    predict_rollout,
    update_step,
)
from panoptrack.utils.errors import TrainingDivergedError

# --------------------------------------------------------------------------
# trajectory dataset


@dataclass(frozen=True)
class TrajectoryStep:
    frame: int
    truth: Box3D
    detection: Optional[Box3D] = None
    confidence: float = 0.0
    camera_id: Optional[int] = None

    @property
    def matched(self) -> bool:
        return self.detection is not None


@dataclass(frozen=True)
class TrajectorySample:
    object_id: int
    category: str
    steps: Tuple[TrajectoryStep, ...]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def name(self) -> str:
        return f"object {self.object_id} from frame {self.steps[0].frame}"


@dataclass(frozen=True)
class TrainConfig:
    window: int = WINDOW
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    w_linear: float = W_LINEAR
    bev_match_threshold: float = BEV_MATCH_THRESHOLD
    learning_rate: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    huber_delta: float = HUBER_DELTA
    validation_fraction: float = VALIDATION_FRACTION
    cross_camera: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.window < 4:
            raise ValueError("window must hold at least 4 boxes (3 velocities)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.learning_rate < 0.0 or self.weight_decay < 0.0 or self.w_linear < 0.0:
            raise ValueError("learning_rate, weight_decay and w_linear must not be negative")
        if self.huber_delta <= 0.0 or self.bev_match_threshold <= 0.0:
            raise ValueError("huber_delta and bev_match_threshold must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


def match_ground_truth(
    truths: Sequence[Tuple[int, Box3D, str]],
    detections: Sequence[DetectionRecord],
    threshold: float,
) -> Dict[int, int]:
    """Ascending-distance greedy one-to-one matching; returns gt index -> det index."""
    candidates = []
    for g, (_, box, category) in enumerate(truths):
        for d, detection in enumerate(detections):
            if detection.category != category:
                continue
            distance = bev_distance(box, detection.box)
            if distance <= threshold:
                candidates.append((distance, g, d))
    candidates.sort()
    used_d, matches = set(), {}
    for _, g, d in candidates:
        if g in matches or d in used_d:
            continue
        matches[g] = d
        used_d.add(d)
    return matches


def _runs(frames: List[int]) -> List[List[int]]:
    runs: List[List[int]] = []
    for frame in frames:
        if runs and frame == runs[-1][-1] + 1:
            runs[-1].append(frame)
        else:
            runs.append([frame])
    return runs


def build_trajectory_dataset(
    gt: GroundTruth,
    detections: Mapping[int, Sequence[DetectionRecord]],
    threshold: float = BEV_MATCH_THRESHOLD,
    window: int = WINDOW,
    cross_camera: bool = True,
) -> List[TrajectorySample]:
    steps: Dict[int, Dict[int, TrajectoryStep]] = {}
    categories: Dict[int, str] = {}
    for frame in sorted(gt.frames):
        objects = gt.frames[frame]
        frame_detections = list(detections.get(frame, []))
        truths = [(o.object_id, o.box, o.category) for o in objects]
        matches = match_ground_truth(truths, frame_detections, threshold)
        for g, obj in enumerate(objects):
            categories[obj.object_id] = obj.category
            match = frame_detections[matches[g]] if g in matches else None
            steps.setdefault(obj.object_id, {})[frame] = TrajectoryStep(
                frame=frame,
                truth=obj.box,
                detection=match.box if match else None,
                confidence=match.confidence if match else 0.0,
                camera_id=match.camera_id if match else None,
            )

    samples: List[TrajectorySample] = []
    for object_id in sorted(steps):
        by_frame = steps[object_id]
        for run in _runs(sorted(by_frame)):
            for start in range(0, len(run) - window + 1):
                chunk = tuple(by_frame[f] for f in run[start : start + window])
                cameras = {s.camera_id for s in chunk if s.matched}
                if not cameras:
                    continue
                if not cross_camera and len(cameras) > 1:
                    continue
                samples.append(TrajectorySample(object_id, categories[object_id], chunk))
    return samples


# --------------------------------------------------------------------------
# losses


def huber(error: np.ndarray, delta: float = HUBER_DELTA) -> np.ndarray:
    magnitude = np.abs(error)
    return np.where(
        magnitude <= delta, 0.5 * error**2, delta * (magnitude - 0.5 * delta)
    )


def huber_grad(error: np.ndarray, delta: float = HUBER_DELTA) -> np.ndarray:
    return np.clip(error, -delta, delta)


def velocity_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    error = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    error[..., THETA] = wrap_angles(error[..., THETA])
    return error


def trajectory_loss(
    v: np.ndarray, v_hat: np.ndarray, v_true: np.ndarray, delta: float = HUBER_DELTA
) -> float:
    v, v_hat, v_true = (np.asarray(a, dtype=np.float64) for a in (v, v_hat, v_true))
    if not (v.shape == v_hat.shape == v_true.shape) or v.ndim != 2:
        raise ValueError(
            f"velocity sequences must share a (T, 7) shape: {v.shape}, {v_hat.shape}, {v_true.shape}"
        )
    per_step = huber(velocity_error(v_hat, v_true), delta).sum(axis=1) + huber(
        velocity_error(v, v_true), delta
    ).sum(axis=1)
    return float(per_step.mean())


def second_difference(v_hat: np.ndarray) -> np.ndarray:
    return v_hat[2:] - 2.0 * v_hat[1:-1] + v_hat[:-2]


def linearity_loss(v_hat: np.ndarray) -> float:
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v_hat.ndim != 2 or len(v_hat) < 3:
        raise ValueError("linearity loss needs at least 3 predicted velocities")
    return float(np.abs(second_difference(v_hat)).sum(axis=1).mean())


def motion_loss(
    v: np.ndarray,
    v_hat: np.ndarray,
    v_true: np.ndarray,
    w_linear: float = W_LINEAR,
    delta: float = HUBER_DELTA,
) -> float:
    return trajectory_loss(v, v_hat, v_true, delta) + w_linear * linearity_loss(v_hat)


def embed_loss(
    key: np.ndarray, positives: Sequence[np.ndarray], negatives: Sequence[np.ndarray]
) -> float:
    if len(positives) == 0:
        raise ValueError("embed loss needs at least one positive")
    if len(negatives) == 0:
        return 0.0
    pos = np.asarray(positives) @ key
    neg = np.asarray(negatives) @ key
    exponents = (neg[None, :] - pos[:, None]).ravel()
    return float(np.logaddexp(0.0, logsumexp(exponents)))


def embed_loss_grad(
    key: np.ndarray, positives: Sequence[np.ndarray], negatives: Sequence[np.ndarray]
) -> np.ndarray:
    if len(positives) == 0:
        raise ValueError("embed loss needs at least one positive")
    if len(negatives) == 0:
        return np.zeros_like(np.asarray(key, dtype=np.float64))
    pos_vectors, neg_vectors = np.asarray(positives), np.asarray(negatives)
    exponents = (neg_vectors @ key)[None, :] - (pos_vectors @ key)[:, None]
    total = np.logaddexp(0.0, logsumexp(exponents))
    weights = np.exp(exponents - total)
    return weights.sum(axis=0) @ neg_vectors - weights.sum(axis=1) @ pos_vectors


def _cosine(a: np.ndarray, b: np.ndarray) -> Tuple[float, float, float]:
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine similarity of a zero-norm embedding")
    return float(a @ b) / (norm_a * norm_b), norm_a, norm_b


def aux_loss(key: np.ndarray, reference: np.ndarray, same_object: bool) -> float:
    cosine, _, _ = _cosine(np.asarray(key, float), np.asarray(reference, float))
    return (cosine - float(same_object)) ** 2


def aux_loss_grad(key: np.ndarray, reference: np.ndarray, same_object: bool) -> np.ndarray:
    key, reference = np.asarray(key, float), np.asarray(reference, float)
    cosine, norm_k, norm_r = _cosine(key, reference)
    d_cosine = reference / (norm_k * norm_r) - cosine * key / norm_k**2
    return 2.0 * (cosine - float(same_object)) * d_cosine


def similarity_loss(
    embed_term: float, aux_term: float, lambda_embed: float = LAMBDA_EMBED
) -> float:
    return lambda_embed * embed_term + aux_term


# --------------------------------------------------------------------------
# window replay with backpropagation through time


@dataclass(frozen=True)
class WindowBatch:
    truth: np.ndarray  # (B, T, 7)
    detection: np.ndarray  # (B, T, 7), zeros at gaps
    confidence: np.ndarray  # (B, T)
    matched: np.ndarray  # (B, T) bool
    names: Tuple[str, ...]

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample]) -> "WindowBatch":
        truth = np.array([[s.truth.to_array() for s in sample.steps] for sample in samples])
        detection = np.array(
            [
                [s.detection.to_array() if s.matched else np.zeros(BOX_DIM) for s in sample.steps]
                for sample in samples
            ]
        )
        confidence = np.array([[s.confidence for s in sample.steps] for sample in samples])
        matched = np.array([[s.matched for s in sample.steps] for sample in samples])
        return cls(truth, detection, confidence, matched, tuple(s.name for s in samples))

    def __len__(self) -> int:
        return self.truth.shape[0]

    @property
    def true_velocities(self) -> np.ndarray:
        return velocity_error(self.truth[:, 1:], self.truth[:, :-1])


@dataclass
class _StepCache:
    buffer: np.ndarray
    rollout: List[Tuple[np.ndarray, CellCache]]
    h_pred: np.ndarray
    v_hat: np.ndarray
    v_observed: np.ndarray
    confidence: np.ndarray
    update_cache: CellCache
    h_update: np.ndarray
    mask: np.ndarray


@dataclass
class Replay:
    v: np.ndarray  # (B, T-1, 7)
    v_hat: np.ndarray  # (B, T-1, 7)
    caches: List[_StepCache] = field(repr=False)


def replay_window(batch: WindowBatch, weights: LstmWeights) -> Replay:
    n = weights.hidden_size
    size, length = batch.truth.shape[:2]
    h_p, c_p = np.zeros((size, n)), np.zeros((size, n))
    h_u, c_u = np.zeros((size, n)), np.zeros((size, n))
    buffer = np.zeros((size, HISTORY_LENGTH, BOX_DIM))
    first = batch.matched[:, 0][:, None]
    box = np.where(first, batch.detection[:, 0], batch.truth[:, 0])
    v_all, v_hat_all, caches = [], [], []
    for t in range(1, length):
        v_hat, h_p, c_p, rollout = predict_rollout(buffer, h_p, c_p, weights)
        mask = batch.matched[:, t][:, None]
        v_observed = np.where(mask, velocity_error(batch.detection[:, t], box), 0.0)
        confidence = batch.confidence[:, t][:, None]
        v_update, h_new, c_new, update_cache = update_step(
            v_hat, v_observed, confidence, h_u, c_u, weights
        )
        caches.append(
            _StepCache(buffer, rollout, h_p, v_hat, v_observed, confidence, update_cache, h_new, mask)
        )
        h_u = np.where(mask, h_new, h_u)
        c_u = np.where(mask, c_new, c_u)
        v = np.where(mask, v_update, v_hat)
        box = box + v
        box[:, THETA] = wrap_angles(box[:, THETA])
        buffer = np.concatenate([buffer[:, 1:], v[:, None, :]], axis=1)
        v_all.append(v)
        v_hat_all.append(v_hat)
    return Replay(np.stack(v_all, axis=1), np.stack(v_hat_all, axis=1), caches)


@dataclass(frozen=True)
class LossTerms:
    total: np.ndarray  # per sample
    trajectory: np.ndarray
    linear: np.ndarray


def window_losses(
    replay: Replay, batch: WindowBatch, w_linear: float, delta: float
) -> LossTerms:
    v_true = batch.true_velocities
    trajectory = (
        huber(velocity_error(replay.v_hat, v_true), delta).sum(axis=2)
        + huber(velocity_error(replay.v, v_true), delta).sum(axis=2)
    ).mean(axis=1)
    second = replay.v_hat[:, 2:] - 2.0 * replay.v_hat[:, 1:-1] + replay.v_hat[:, :-2]
    linear = np.abs(second).sum(axis=2).mean(axis=1)
    return LossTerms(trajectory + w_linear * linear, trajectory, linear)


def _loss_gradients(
    replay: Replay, batch: WindowBatch, w_linear: float, delta: float
) -> Tuple[np.ndarray, np.ndarray]:
    """d(mean batch loss) / d v and d v_hat, each (B, T-1, 7)."""
    size, steps = replay.v.shape[:2]
    v_true = batch.true_velocities
    scale = 1.0 / (size * steps)
    dv = huber_grad(velocity_error(replay.v, v_true), delta) * scale
    dv_hat = huber_grad(velocity_error(replay.v_hat, v_true), delta) * scale
    second = replay.v_hat[:, 2:] - 2.0 * replay.v_hat[:, 1:-1] + replay.v_hat[:, :-2]
    sign = np.sign(second) * (w_linear / (size * (steps - 2)))
    dv_hat[:, 2:] += sign
    dv_hat[:, 1:-1] -= 2.0 * sign
    dv_hat[:, :-2] += sign
    return dv, dv_hat


def _accumulate(grads: Dict[str, np.ndarray], name: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of a projection y = x W^T + b; returns dx."""
    grads[f"{name}.weight"] += dy.T @ x
    grads[f"{name}.bias"] += dy.sum(axis=0)
    return dy


def backward_window(
    replay: Replay,
    batch: WindowBatch,
    weights: LstmWeights,
    w_linear: float,
    delta: float,
) -> Dict[str, np.ndarray]:
    grads = weights.zeros_like()
    n = weights.hidden_size
    size = len(batch)
    dv_loss, dv_hat_loss = _loss_gradients(replay, batch, w_linear, delta)
    dh_p, dc_p = np.zeros((size, n)), np.zeros((size, n))
    dh_u, dc_u = np.zeros((size, n)), np.zeros((size, n))
    d_box = np.zeros((size, BOX_DIM))
    d_buffer = np.zeros((size, HISTORY_LENGTH, BOX_DIM))
    p_width = weights["update.in_predicted.weight"].shape[0]

    for t in reversed(range(len(replay.caches))):
        cache = replay.caches[t]
        mask = cache.mask.astype(np.float64)
        dv = dv_loss[:, t] + d_box + d_buffer[:, -1]
        shifted = np.zeros_like(d_buffer)
        shifted[:, 1:] = d_buffer[:, :-1]
        d_buffer = shifted

        # refinement network
        dv_update = mask * dv
        grads["update.out.weight"] += dv_update.T @ cache.h_update
        grads["update.out.bias"] += dv_update.sum(axis=0)
        dh_new = dv_update @ weights["update.out.weight"] + mask * dh_u
        dc_new = mask * dc_u
        dx, dh_prev, dc_prev, dw, db = lstm_cell_backward(
            dh_new, dc_new, cache.update_cache, weights["update.lstm.weight"]
        )
        grads["update.lstm.weight"] += dw
        grads["update.lstm.bias"] += db
        dh_u = dh_prev + (1.0 - mask) * dh_u
        dc_u = dc_prev + (1.0 - mask) * dc_u
        dx_pred, dx_obs, dx_conf = dx[:, :p_width], dx[:, p_width : 2 * p_width], dx[:, 2 * p_width :]
        _accumulate(grads, "update.in_predicted", cache.v_hat, dx_pred)
        _accumulate(grads, "update.in_observed", cache.v_observed, dx_obs)
        _accumulate(grads, "update.in_confidence", cache.confidence, dx_conf)
        dv_observed = mask * (dx_obs @ weights["update.in_observed.weight"])
        d_box = d_box - dv_observed

        # prediction network
        dv_hat = dv_hat_loss[:, t] + (1.0 - mask) * dv + dx_pred @ weights["update.in_predicted.weight"]
        grads["pred.out.weight"] += dv_hat.T @ cache.h_pred
        grads["pred.out.bias"] += dv_hat.sum(axis=0)
        dh_p = dh_p + dv_hat @ weights["pred.out.weight"]
        for k in reversed(range(len(cache.rollout))):
            velocity, cell = cache.rollout[k]
            dx, dh_p, dc_p, dw, db = lstm_cell_backward(
                dh_p, dc_p, cell, weights["pred.lstm.weight"]
            )
            grads["pred.lstm.weight"] += dw
            grads["pred.lstm.bias"] += db
            _accumulate(grads, "pred.in_velocity", velocity, dx)
            d_buffer[:, k] += dx @ weights["pred.in_velocity.weight"]
    return grads


def loss_and_gradients(
    batch: WindowBatch,
    weights: LstmWeights,
    w_linear: float = W_LINEAR,
    delta: float = HUBER_DELTA,
) -> Tuple[float, LossTerms, Dict[str, np.ndarray]]:
    replay = replay_window(batch, weights)
    terms = window_losses(replay, batch, w_linear, delta)
    grads = backward_window(replay, batch, weights, w_linear, delta)
    return float(terms.total.mean()), terms, grads


# --------------------------------------------------------------------------
# optimizer and training loop


class AmsGrad:
    """Adam with the AMSGrad maximum and L2 weight decay folded into the gradient."""

    def __init__(
        self,
        weights: LstmWeights,
        lr: float = LEARNING_RATE,
        betas: Tuple[float, float] = ADAM_BETAS,
        eps: float = ADAM_EPS,
        weight_decay: float = WEIGHT_DECAY,
    ) -> None:
        if lr < 0.0:
            raise ValueError(f"invalid learning rate: {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"invalid betas: {betas}")
        self.weights = weights
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = weights.zeros_like()
        self.v = weights.zeros_like()
        self.v_max = weights.zeros_like()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name in self.weights:
            param = self.weights[name]
            grad = grads[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            np.maximum(self.v_max[name], self.v[name], out=self.v_max[name])
            denominator = np.sqrt(self.v_max[name] / correction2) + self.eps
            if self.lr:
                param -= self.lr * (self.m[name] / correction1) / denominator


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    traj_term: float
    linear_term: float
    validation_loss: Optional[float] = None


def split_dataset(
    samples: Sequence[TrajectorySample], fraction: float, seed: int
) -> Tuple[List[TrajectorySample], List[TrajectorySample]]:
    if fraction <= 0.0 or len(samples) < 2:
        return list(samples), []
    order = np.random.default_rng(seed).permutation(len(samples))
    count = max(1, int(round(fraction * len(samples))))
    held = set(order[:count].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    validation = [s for i, s in enumerate(samples) if i in held]
    return train, validation


def evaluate_motion_loss(
    samples: Sequence[TrajectorySample], weights: LstmWeights, config: TrainConfig
) -> float:
    batch = WindowBatch.from_samples(samples)
    replay = replay_window(batch, weights)
    return float(window_losses(replay, batch, config.w_linear, config.huber_delta).total.mean())


def _check_finite(terms: LossTerms, batch: WindowBatch, epoch: int) -> None:
    bad = np.flatnonzero(~np.isfinite(terms.total))
    if bad.size:
        raise TrainingDivergedError(sample=batch.names[int(bad[0])], epoch=epoch)


def train_motion_model(
    dataset: Sequence[TrajectorySample],
    weights: LstmWeights,
    config: TrainConfig = TrainConfig(),
    logger: Optional[Logger] = None,
) -> List[EpochRecord]:
    """Train both recurrent networks in place; returns the per-epoch log."""
    logger = logger or getLogger("panoptrack")
    if not dataset:
        raise ValueError("cannot train on an empty trajectory dataset")
    lengths = {len(s) for s in dataset}
    if len(lengths) != 1:
        raise ValueError(f"all windows must share one length, got {sorted(lengths)}")
    train, validation = split_dataset(dataset, config.validation_fraction, config.seed)
    logger.info(
        f"training on {len(train)} windows, validating on {len(validation)}, "
        f"hidden size {weights.hidden_size}"
    )
    optimizer = AmsGrad(
        weights, lr=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    log: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        total = trajectory = linear = 0.0
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start : start + config.batch_size]]
            batch = WindowBatch.from_samples(chunk)
            _, terms, grads = loss_and_gradients(
                batch, weights, config.w_linear, config.huber_delta
            )
            _check_finite(terms, batch, epoch)
            optimizer.step(grads)
            total += float(terms.total.sum())
            trajectory += float(terms.trajectory.sum())
            linear += float(terms.linear.sum())
        validation_loss = (
            evaluate_motion_loss(validation, weights, config) if validation else None
        )
        record = EpochRecord(
            epoch=epoch,
            mean_loss=total / len(train),
            traj_term=trajectory / len(train),
            linear_term=linear / len(train),
            validation_loss=validation_loss,
        )
        log.append(record)
        logger.info(
            f"epoch {epoch}: loss {record.mean_loss:.5f} "
            f"(trajectory {record.traj_term:.5f}, linearity {record.linear_term:.5f})"
            + (f", validation {validation_loss:.5f}" if validation_loss is not None else "")
        )
    return log
