from typing import Optional


class PanoptrackError(Exception):
    pass


class GeometryError(PanoptrackError, ValueError):
    pass


class MissingPoseError(PanoptrackError):
    def __init__(self, camera_id: int, frame: int) -> None:
        self.camera_id = camera_id
        self.frame = frame
        super().__init__(f"no pose for camera {camera_id} at frame {frame}")


class FrameOrderError(PanoptrackError):
    def __init__(self, previous: int, current: int) -> None:
        self.previous = previous
        self.current = current
        super().__init__(
            f"frames must be in ascending order: {current} follows {previous}"
        )


class FrameMismatchError(PanoptrackError):
    def __init__(self, expected: int, got: int) -> None:
        self.expected = expected
        self.got = got
        super().__init__(f"detection from frame {got} passed to frame {expected}")


class NumericalError(PanoptrackError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, sample: str, epoch: int) -> None:
        self.sample = sample
        self.epoch = epoch
        super().__init__(f"non-finite motion loss for sample {sample} in epoch {epoch}")


class RecordError(PanoptrackError):
    def __init__(self, path: str, line: Optional[int], message: str) -> None:
        self.path = path
        self.line = line
        self.message = message
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


class ConfigError(PanoptrackError):
    def __init__(self, key: str, message: str) -> None:
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")
