import numpy as np
import pytest
from fs.memoryfs import MemoryFS

from panoptrack.fusion import DetectionRecord
from panoptrack.geom import Box3D
from panoptrack.motion import LstmWeights


def make_box(x=0.0, y=0.0, z=0.8, theta=0.0, l=4.5, w=1.9, h=1.6):  # noqa: E741
    return Box3D(x, y, z, theta, l, w, h)


def unit(vector):
    vector = np.asarray(vector, dtype=np.float64)
    return vector / np.linalg.norm(vector)


def make_detection(
    x=0.0,
    y=0.0,
    confidence=0.9,
    camera_id=0,
    frame=0,
    category="car",
    embedding=None,
    **box,
):
    return DetectionRecord(
        box=make_box(x, y, **box),
        confidence=confidence,
        camera_id=camera_id,
        frame=frame,
        category=category,
        embedding=None if embedding is None else unit(embedding),
    )


@pytest.fixture
def memory_fs():
    filesystem = MemoryFS()
    yield filesystem
    filesystem.close()


@pytest.fixture
def small_weights():
    return LstmWeights.initialize(hidden_size=8, seed=3, scale=0.3)
