"""Motion models over 7-DoF box states.

Two families live here: the constant-velocity Kalman filter (KF3D) and the
recurrent pair that predicts a velocity from the recent history and refines
it once a detection has been associated. The recurrent cells come with hand
written backward passes; ``panoptrack.learn`` chains them through time.
"""

import struct
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from fs.base import FS
from fs.errors import ResourceNotFound
from scipy.special import expit

from panoptrack.config.defaults import (
    FORGET_BIAS,
    HIDDEN_SIZE,
    HISTORY_LENGTH,
    KF_P0_POSITION,
    KF_P0_VELOCITY,
    KF_Q_POSITION,
    KF_Q_VELOCITY,
    KF_R_EPS,
    KF_R_POSITION,
    KF_R_THETA,
    MANIFEST_SUFFIX,
    PROJECTION_SIZE,
    WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
)
from panoptrack.geom import Box3D, wrap_angle, wrap_angles
from panoptrack.utils.errors import NumericalError, RecordError

BOX_DIM = 7
KF_DIM = 11
THETA = 3
MIN_EXTENT = 1e-3


def box_difference(a: Box3D, b: Box3D) -> np.ndarray:
    """a - b as a 7-vector with a wrapped yaw component."""
    diff = a.to_array() - b.to_array()
    diff[THETA] = wrap_angle(diff[THETA])
    return diff


def advance_box(box: Box3D, velocity: np.ndarray) -> Box3D:
    values = box.to_array() + np.asarray(velocity, dtype=np.float64)
    values[4:] = np.maximum(values[4:], MIN_EXTENT)
    return Box3D.from_array(values)


def wrap_velocity(velocity: np.ndarray) -> np.ndarray:
    velocity = np.array(velocity, dtype=np.float64)
    velocity[..., THETA] = wrap_angles(velocity[..., THETA])
    return velocity


# --------------------------------------------------------------------------
# KF3D


@dataclass(frozen=True)
class KalmanConfig:
    q_position: float = KF_Q_POSITION
    q_velocity: float = KF_Q_VELOCITY
    r_position: float = KF_R_POSITION
    r_theta: float = KF_R_THETA
    p0_position: float = KF_P0_POSITION
    p0_velocity: float = KF_P0_VELOCITY
    r_eps: float = KF_R_EPS

    def __post_init__(self) -> None:
        for name in ("q_position", "q_velocity", "r_position", "r_theta"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def transition(self) -> np.ndarray:
        f = np.eye(KF_DIM)
        for i in range(4):
            f[i, BOX_DIM + i] = 1.0
        return f

    @property
    def measurement(self) -> np.ndarray:
        return np.eye(BOX_DIM, KF_DIM)

    @property
    def process_noise(self) -> np.ndarray:
        return np.diag([self.q_position] * BOX_DIM + [self.q_velocity] * 4)

    def measurement_noise(self, confidence: float) -> np.ndarray:
        base = [self.r_position] * 3 + [self.r_theta] + [self.r_position] * 3
        return np.diag(base) * (1.0 - confidence + self.r_eps)


@dataclass(frozen=True)
class KfState:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def box(self) -> Box3D:
        values = self.mean[:BOX_DIM].copy()
        values[4:] = np.maximum(values[4:], MIN_EXTENT)
        return Box3D.from_array(values)

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[BOX_DIM:].copy()


def kf_init(box: Box3D, config: KalmanConfig = KalmanConfig()) -> KfState:
    mean = np.concatenate([box.to_array(), np.zeros(4)])
    covariance = np.diag([config.p0_position] * BOX_DIM + [config.p0_velocity] * 4)
    return KfState(mean=mean, covariance=covariance)


def kf_predict(state: KfState, config: KalmanConfig = KalmanConfig()) -> KfState:
    f = config.transition
    mean = f @ state.mean
    mean[THETA] = wrap_angle(mean[THETA])
    covariance = f @ state.covariance @ f.T + config.process_noise
    return KfState(mean=mean, covariance=0.5 * (covariance + covariance.T))


def kf_update(
    state: KfState,
    observation: Box3D,
    confidence: float,
    config: KalmanConfig = KalmanConfig(),
) -> KfState:
    h = config.measurement
    r = config.measurement_noise(confidence)
    innovation = observation.to_array() - h @ state.mean
    innovation[THETA] = wrap_angle(innovation[THETA])
    s = h @ state.covariance @ h.T + r
    gain = np.linalg.solve(s, h @ state.covariance).T
    mean = state.mean + gain @ innovation
    mean[THETA] = wrap_angle(mean[THETA])
    # Joseph form keeps the covariance positive definite.
    a = np.eye(KF_DIM) - gain @ h
    covariance = a @ state.covariance @ a.T + gain @ r @ gain.T
    covariance = 0.5 * (covariance + covariance.T)
    try:
        np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance lost positive definiteness") from None
    return KfState(mean=mean, covariance=covariance)


# --------------------------------------------------------------------------
# recurrent motion model

PRED_INPUTS: Dict[str, int] = {"pred.in_velocity": BOX_DIM}
UPDATE_INPUTS: Dict[str, int] = {
    "update.in_predicted": BOX_DIM,
    "update.in_observed": BOX_DIM,
    "update.in_confidence": 1,
}


def weight_shapes(hidden_size: int) -> Dict[str, Tuple[int, ...]]:
    p = PROJECTION_SIZE
    shapes: Dict[str, Tuple[int, ...]] = {}
    for name, width in {**PRED_INPUTS, **UPDATE_INPUTS}.items():
        shapes[f"{name}.weight"] = (p, width)
        shapes[f"{name}.bias"] = (p,)
    for net, inputs in (("pred", 1), ("update", 3)):
        shapes[f"{net}.lstm.weight"] = (4 * hidden_size, inputs * p + hidden_size)
        shapes[f"{net}.lstm.bias"] = (4 * hidden_size,)
        shapes[f"{net}.out.weight"] = (BOX_DIM, hidden_size)
        shapes[f"{net}.out.bias"] = (BOX_DIM,)
    return shapes


@dataclass
class LstmWeights:
    hidden_size: int
    tensors: Dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = weight_shapes(self.hidden_size)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"weight names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            tensor = np.asarray(self.tensors[name], dtype=np.float64)
            if tensor.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensor.shape}")
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"{name}: non-finite values")
            self.tensors[name] = tensor

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.tensors))

    @classmethod
    def zeros(cls, hidden_size: int = HIDDEN_SIZE) -> "LstmWeights":
        return cls(
            hidden_size,
            {name: np.zeros(shape) for name, shape in weight_shapes(hidden_size).items()},
        )

    @classmethod
    def initialize(
        cls, hidden_size: int = HIDDEN_SIZE, seed: int = 0, scale: Optional[float] = None
    ) -> "LstmWeights":
        rng = np.random.default_rng(seed)
        k = scale if scale is not None else 1.0 / np.sqrt(hidden_size)
        tensors = {
            name: rng.uniform(-k, k, size=shape)
            for name, shape in sorted(weight_shapes(hidden_size).items())
        }
        for net in ("pred", "update"):
            tensors[f"{net}.lstm.bias"][hidden_size : 2 * hidden_size] = FORGET_BIAS
        return cls(hidden_size, tensors)

    def copy(self) -> "LstmWeights":
        return LstmWeights(
            self.hidden_size, {name: t.copy() for name, t in self.tensors.items()}
        )

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(t) for name, t in self.tensors.items()}


def save_weights(weights: LstmWeights, fs: FS, path: str) -> None:
    payload = bytearray()
    names = list(weights)
    payload += WEIGHTS_MAGIC
    payload += struct.pack("<III", WEIGHTS_VERSION, weights.hidden_size, len(names))
    manifest: List[str] = [
        f"version {WEIGHTS_VERSION}",
        f"hidden_size {weights.hidden_size}",
    ]
    for name in names:
        tensor = weights[name]
        encoded = name.encode("utf-8")
        payload += struct.pack("<H", len(encoded)) + encoded
        payload += struct.pack("<B", tensor.ndim)
        payload += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        payload += np.ascontiguousarray(tensor, dtype="<f8").tobytes(order="C")
        manifest.append(f"{name} {'x'.join(str(s) for s in tensor.shape)}")
    fs.writebytes(path, bytes(payload))
    fs.writetext(path + MANIFEST_SUFFIX, "\n".join(manifest) + "\n")


def load_weights(fs: FS, path: str) -> LstmWeights:
    try:
        data = fs.readbytes(path)
    except ResourceNotFound:
        raise RecordError(path, None, "file not found") from None
    if data[:4] != WEIGHTS_MAGIC:
        raise RecordError(path, None, "not a panoptrack weight file")
    offset = 4
    try:
        version, hidden_size, count = struct.unpack_from("<III", data, offset)
        offset += 12
        if version != WEIGHTS_VERSION:
            raise RecordError(path, None, f"unsupported weight version {version}")
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + length].decode("utf-8")
            offset += length
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensor = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            tensors[name] = tensor.reshape(shape).astype(np.float64)
        return LstmWeights(hidden_size, tensors)
    except (struct.error, ValueError) as error:
        raise RecordError(path, None, f"corrupt weight file: {error}") from None


@dataclass(frozen=True)
class CellCache:
    xh: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def lstm_cell(
    x: np.ndarray, h: np.ndarray, c: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, CellCache]:
    """One batched LSTM step with gate order input, forget, cell, output."""
    n = h.shape[-1]
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ weight.T + bias
    i = expit(z[:, :n])
    f = expit(z[:, n : 2 * n])
    g = np.tanh(z[:, 2 * n : 3 * n])
    o = expit(z[:, 3 * n :])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    return o * tanh_c, c_new, CellCache(xh, c, i, f, g, o, tanh_c)


def lstm_cell_backward(
    dh: np.ndarray, dc: np.ndarray, cache: CellCache, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dh_prev, dc_prev, dweight, dbias)."""
    n = dh.shape[-1]
    do = dh * cache.tanh_c
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c**2)
    dz = np.concatenate(
        [
            dc * cache.g * cache.i * (1.0 - cache.i),
            dc * cache.c_prev * cache.f * (1.0 - cache.f),
            dc * cache.i * (1.0 - cache.g**2),
            do * cache.o * (1.0 - cache.o),
        ],
        axis=-1,
    )
    dxh = dz @ weight
    d_in = dxh.shape[-1] - n
    return dxh[:, :d_in], dxh[:, d_in:], dc * cache.f, dz.T @ cache.xh, dz.sum(axis=0)


def project(x: np.ndarray, weights: LstmWeights, name: str) -> np.ndarray:
    return x @ weights[f"{name}.weight"].T + weights[f"{name}.bias"]


@dataclass(frozen=True)
class LstmState:
    h_pred: np.ndarray
    c_pred: np.ndarray
    h_update: np.ndarray
    c_update: np.ndarray
    velocities: np.ndarray = field(repr=False)

    @classmethod
    def zeros(cls, hidden_size: int = HIDDEN_SIZE) -> "LstmState":
        return cls(
            h_pred=np.zeros(hidden_size),
            c_pred=np.zeros(hidden_size),
            h_update=np.zeros(hidden_size),
            c_update=np.zeros(hidden_size),
            velocities=np.zeros((HISTORY_LENGTH, BOX_DIM)),
        )

    def push(self, velocity: np.ndarray) -> "LstmState":
        # Oldest slot first; a young track keeps zeros at the front.
        velocities = np.vstack([self.velocities[1:], np.asarray(velocity)[None, :]])
        return replace(self, velocities=velocities)


def predict_rollout(
    velocities: np.ndarray, h: np.ndarray, c: np.ndarray, weights: LstmWeights
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[Tuple[np.ndarray, CellCache]]]:
    """Batched prediction network: velocities (B, n, 7) -> (v_hat, h, c, caches)."""
    caches = []
    for k in range(velocities.shape[1]):
        x = project(velocities[:, k, :], weights, "pred.in_velocity")
        h, c, cache = lstm_cell(x, h, c, weights["pred.lstm.weight"], weights["pred.lstm.bias"])
        caches.append((velocities[:, k, :], cache))
    v_hat = wrap_velocity(project(h, weights, "pred.out"))
    return v_hat, h, c, caches


def update_step(
    v_hat: np.ndarray,
    v_observed: np.ndarray,
    confidence: np.ndarray,
    h: np.ndarray,
    c: np.ndarray,
    weights: LstmWeights,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, CellCache]:
    """Batched refinement network; confidence has shape (B, 1)."""
    x = np.concatenate(
        [
            project(v_hat, weights, "update.in_predicted"),
            project(v_observed, weights, "update.in_observed"),
            project(confidence, weights, "update.in_confidence"),
        ],
        axis=-1,
    )
    h, c, cache = lstm_cell(x, h, c, weights["update.lstm.weight"], weights["update.lstm.bias"])
    return wrap_velocity(project(h, weights, "update.out")), h, c, cache


def lstm_predict(state: LstmState, weights: LstmWeights) -> Tuple[np.ndarray, LstmState]:
    v_hat, h, c, _ = predict_rollout(
        state.velocities[None], state.h_pred[None], state.c_pred[None], weights
    )
    return v_hat[0], replace(state, h_pred=h[0], c_pred=c[0])


def lstm_update(
    state: LstmState,
    v_hat: np.ndarray,
    v_observed: np.ndarray,
    confidence: float,
    weights: LstmWeights,
) -> Tuple[np.ndarray, LstmState]:
    v, h, c, _ = update_step(
        np.asarray(v_hat, dtype=np.float64)[None],
        np.asarray(v_observed, dtype=np.float64)[None],
        np.array([[confidence]], dtype=np.float64),
        state.h_update[None],
        state.c_update[None],
        weights,
    )
    return v[0], replace(state, h_update=h[0], c_update=c[0]).push(v[0])


def lstm_skip(state: LstmState, v_hat: np.ndarray) -> LstmState:
    """An unmatched frame: the prediction stands in for the refined velocity."""
    return state.push(v_hat)


# --------------------------------------------------------------------------
# tracker-facing motion models


class MotionModel:
    name = "none"

    def start(self, box: Box3D) -> object:
        return None

    def predict(self, handle: object, box: Box3D) -> Tuple[Box3D, object]:
        return box, handle

    def correct(
        self,
        handle: object,
        previous: Box3D,
        predicted: Box3D,
        observation: Box3D,
        confidence: float,
    ) -> Tuple[Box3D, object]:
        return observation, handle

    def coast(self, handle: object, predicted: Box3D) -> object:
        return handle


class NoMotion(MotionModel):
    pass


class KalmanMotion(MotionModel):
    name = "kf3d"

    def __init__(self, config: KalmanConfig = KalmanConfig()) -> None:
        self.config = config

    def start(self, box: Box3D) -> KfState:
        return kf_init(box, self.config)

    def predict(self, handle: KfState, box: Box3D) -> Tuple[Box3D, KfState]:
        state = kf_predict(handle, self.config)
        return state.box, state

    def correct(self, handle, previous, predicted, observation, confidence):
        state = kf_update(handle, observation, confidence, self.config)
        return state.box, state


@dataclass(frozen=True)
class LstmHandle:
    state: LstmState
    v_hat: np.ndarray


class LstmMotion(MotionModel):
    name = "lstm"

    def __init__(self, weights: LstmWeights) -> None:
        self.weights = weights

    def start(self, box: Box3D) -> LstmHandle:
        return LstmHandle(LstmState.zeros(self.weights.hidden_size), np.zeros(BOX_DIM))

    def predict(self, handle: LstmHandle, box: Box3D) -> Tuple[Box3D, LstmHandle]:
        v_hat, state = lstm_predict(handle.state, self.weights)
        return advance_box(box, v_hat), LstmHandle(state, v_hat)

    def correct(self, handle, previous, predicted, observation, confidence):
        v_observed = box_difference(observation, previous)
        v, state = lstm_update(handle.state, handle.v_hat, v_observed, confidence, self.weights)
        return advance_box(previous, v), LstmHandle(state, handle.v_hat)

    def coast(self, handle: LstmHandle, predicted: Box3D) -> LstmHandle:
        return LstmHandle(lstm_skip(handle.state, handle.v_hat), handle.v_hat)


def build_motion_model(
    kind: str,
    weights: Optional[LstmWeights] = None,
    kalman: KalmanConfig = KalmanConfig(),
) -> MotionModel:
    if kind == "none":
        return NoMotion()
    if kind == "kf3d":
        return KalmanMotion(kalman)
    if kind == "lstm":
        if weights is None:
            raise ValueError("the lstm motion model needs weights")
        return LstmMotion(weights)
    raise ValueError(f"unknown motion model: {kind}")
