import math

import numpy as np
import pytest

from panoptrack.fusion import (
    DetectionRecord,
    FrameBundle,
    lift_frame,
    merge_detections,
    nms_3d,
)
from panoptrack.geom import RigidTransform, iou_3d, transform_box
from panoptrack.utils.errors import GeometryError, MissingPoseError

from conftest import make_detection


def brute_force_nms(detections, threshold):
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].confidence, detections[i].camera_id, i),
    )
    suppressed = [False] * len(detections)
    kept = []
    for position, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(detections[i])
        for j in order[position + 1 :]:
            same = detections[j].category == detections[i].category
            if same and iou_3d(detections[i].box, detections[j].box) >= threshold:
                suppressed[j] = True
    return kept


def random_detections(rng, count):
    return [
        make_detection(
            x=rng.uniform(-6, 6),
            y=rng.uniform(-6, 6),
            confidence=round(rng.uniform(0, 1), 2),
            camera_id=int(rng.integers(0, 3)),
            category=str(rng.choice(["car", "pedestrian"])),
            theta=rng.uniform(-math.pi, math.pi),
        )
        for _ in range(count)
    ]


def test_detection_validates_confidence_and_embedding():
    with pytest.raises(GeometryError):
        make_detection(confidence=1.5)
    with pytest.raises(GeometryError):
        DetectionRecord(
            box=make_detection().box,
            confidence=0.5,
            camera_id=0,
            frame=0,
            embedding=np.array([1.0, 1.0]),
        )


def test_lift_empty_bundle():
    assert lift_frame(FrameBundle(frame=0, detections={}, poses={})) == []


def test_lift_identity_pose_keeps_detections():
    detections = [make_detection(x=float(i), confidence=0.5 + 0.1 * i) for i in range(3)]
    bundle = FrameBundle(0, {0: detections}, {0: RigidTransform()})
    lifted = lift_frame(bundle)
    assert [d.confidence for d in lifted] == [d.confidence for d in detections]
    for before, after in zip(detections, lifted):
        np.testing.assert_allclose(after.box.to_array(), before.box.to_array(), atol=1e-12)


def test_lift_two_cameras_orders_by_camera_and_transforms():
    poses = {
        2: RigidTransform.from_yaw(math.pi / 2),
        1: RigidTransform.from_yaw(-math.pi / 3, (1.0, 2.0, 0.0)),
    }
    detections = {
        2: [make_detection(x=5.0, camera_id=2)],
        1: [make_detection(x=3.0, camera_id=1), make_detection(x=8.0, camera_id=1)],
    }
    lifted = lift_frame(FrameBundle(0, detections, poses))
    assert [d.camera_id for d in lifted] == [1, 1, 2]
    expected = [transform_box(d.box, poses[c]) for c in (1, 2) for d in detections[c]]
    for out, box in zip(lifted, expected):
        np.testing.assert_allclose(out.box.to_array(), box.to_array(), atol=1e-12)


def test_lift_missing_pose_names_camera_and_frame():
    bundle = FrameBundle(7, {3: [make_detection(camera_id=3, frame=7)]}, {})
    with pytest.raises(MissingPoseError) as error:
        lift_frame(bundle)
    assert error.value.camera_id == 3
    assert error.value.frame == 7


def test_nms_keeps_the_more_confident_duplicate():
    kept = nms_3d([make_detection(confidence=0.8), make_detection(confidence=0.9)], 0.1)
    assert [d.confidence for d in kept] == [0.9]


def test_nms_keeps_disjoint_boxes():
    detections = [make_detection(x=0.0), make_detection(x=20.0)]
    assert len(nms_3d(detections, 0.1)) == 2


def test_nms_is_category_aware():
    detections = [make_detection(category="car"), make_detection(category="bus", confidence=0.7)]
    assert len(nms_3d(detections, 0.1)) == 2
    assert len(nms_3d(detections, 0.1, category_aware=False)) == 1


def test_nms_ties_prefer_lower_camera():
    kept = nms_3d([make_detection(camera_id=4), make_detection(camera_id=1)], 0.1)
    assert kept[0].camera_id == 1


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms_3d([], 1.5)


def test_nms_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        detections = random_detections(rng, int(rng.integers(0, 21)))
        kept = nms_3d(detections, 0.1)
        assert kept == brute_force_nms(detections, 0.1)
        assert nms_3d(kept, 0.1) == kept
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.category == b.category:
                    assert iou_3d(a.box, b.box) < 0.1


def test_merge_detections_removes_cross_camera_duplicate():
    world = make_detection(x=10.0, confidence=0.9).box
    poses = {0: RigidTransform.from_yaw(0.2), 1: RigidTransform.from_yaw(-0.2)}
    detections = {
        c: [
            DetectionRecord(
                box=transform_box(world, poses[c].inverse()),
                confidence=0.9 - 0.1 * c,
                camera_id=c,
                frame=0,
            )
        ]
        for c in poses
    }
    merged = merge_detections(FrameBundle(0, detections, poses))
    assert len(merged) == 1
    assert merged[0].camera_id == 0


def test_merge_detections_applies_score_floor():
    bundle = FrameBundle(
        0,
        {0: [make_detection(confidence=0.04), make_detection(x=20.0, confidence=0.5)]},
        {0: RigidTransform()},
    )
    merged = merge_detections(bundle, score_floor=0.05)
    assert [d.confidence for d in merged] == [0.5]
