import math

import numpy as np
import pytest

from panoptrack.fusion import merge_detections
from panoptrack.geom import Box3D
from panoptrack.learn import (
    AmsGrad,
    TrainConfig,
    TrajectorySample,
    TrajectoryStep,
    WindowBatch,
    aux_loss,
    aux_loss_grad,
    build_trajectory_dataset,
    embed_loss,
    embed_loss_grad,
    evaluate_motion_loss,
    huber,
    linearity_loss,
    loss_and_gradients,
    match_ground_truth,
    motion_loss,
    similarity_loss,
    split_dataset,
    train_motion_model,
    trajectory_loss,
)
from panoptrack.metrics import GroundTruth, GroundTruthObject, evaluate
from panoptrack.motion import LstmWeights, build_motion_model
from panoptrack.sim import builtin_rigs, builtin_scenarios, generate
from panoptrack.tracker import TrackerConfig, run_pipeline

from conftest import make_box, make_detection, unit


def velocities(x_values):
    out = np.zeros((len(x_values), 7))
    out[:, 0] = x_values
    return out


def test_huber_examples():
    assert huber(np.array(0.5)) == pytest.approx(0.125)
    assert huber(np.array(2.0)) == pytest.approx(1.5)
    assert huber(np.array(-2.0)) == pytest.approx(1.5)


def test_trajectory_loss_hand_value():
    v_true = np.zeros((1, 7))
    v_hat = velocities([1.0])
    v = velocities([2.0])
    assert trajectory_loss(v, v_hat, v_true) == pytest.approx(2.0)


def test_trajectory_loss_wraps_yaw():
    v_true = np.zeros((1, 7))
    v_true[0, 3] = math.pi - 0.05
    v = v_true.copy()
    v[0, 3] = -math.pi + 0.05
    assert trajectory_loss(v, v_true, v_true) == pytest.approx(0.5 * 0.1**2)


def test_linearity_loss_hand_value():
    assert linearity_loss(velocities([0.0, 1.0, 0.0])) == pytest.approx(2.0)
    assert linearity_loss(velocities([0.0, 1.0, 2.0, 3.0])) == 0.0


def test_motion_loss_hand_value():
    v_hat = velocities([0.0, 1.0, 0.0])
    v_true = velocities([-0.5, 0.5, -0.5])
    assert motion_loss(v_true, v_hat, v_true, w_linear=0.001) == pytest.approx(0.127)


def test_loss_input_errors():
    with pytest.raises(ValueError):
        trajectory_loss(np.zeros((3, 7)), np.zeros((2, 7)), np.zeros((3, 7)))
    with pytest.raises(ValueError):
        linearity_loss(np.zeros((2, 7)))
    with pytest.raises(ValueError):
        embed_loss(unit([1.0, 0.0]), [], [unit([0.0, 1.0])])
    with pytest.raises(ValueError):
        aux_loss(np.zeros(2), unit([1.0, 0.0]), True)


def test_embed_loss_hand_value():
    key, positive, negative = unit([1.0, 0.0]), unit([1.0, 0.0]), unit([0.0, 1.0])
    assert embed_loss(key, [positive], [negative]) == pytest.approx(math.log(1 + math.exp(-1)))
    assert embed_loss(key, [positive], []) == 0.0


def test_embed_loss_gradient():
    rng = np.random.default_rng(10)
    key = unit(rng.normal(size=6))
    positives = [unit(rng.normal(size=6)) for _ in range(2)]
    negatives = [unit(rng.normal(size=6)) for _ in range(3)]
    analytic = embed_loss_grad(key, positives, negatives)
    eps = 1e-6
    for i in range(6):
        step = np.zeros(6)
        step[i] = eps
        numeric = (
            embed_loss(key + step, positives, negatives)
            - embed_loss(key - step, positives, negatives)
        ) / (2 * eps)
        assert analytic[i] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_aux_loss_hand_value_and_gradient():
    key, reference = np.array([1.0, 0.0]), np.array([0.5, math.sqrt(0.75)])
    assert aux_loss(key, reference, True) == pytest.approx(0.25)
    assert aux_loss(key, reference, False) == pytest.approx(0.25)
    key = np.array([0.3, -1.2, 0.7])
    reference = np.array([1.0, 0.4, -0.2])
    analytic = aux_loss_grad(key, reference, True)
    eps = 1e-6
    for i in range(3):
        step = np.zeros(3)
        step[i] = eps
        numeric = (aux_loss(key + step, reference, True) - aux_loss(key - step, reference, True)) / (
            2 * eps
        )
        assert analytic[i] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_similarity_loss_hand_value():
    embed = math.log(1 + math.exp(-1))
    assert similarity_loss(embed, 0.25) == pytest.approx(0.3283, abs=1e-4)
    assert similarity_loss(embed, 0.25, lambda_embed=0.0) == 0.25


def test_match_ground_truth_is_one_to_one():
    truths = [(0, make_box(0.0, 0.0), "car"), (1, make_box(1.5, 0.0), "car")]
    detections = [make_detection(0.5, 0.0)]
    assert match_ground_truth(truths, detections, 2.0) == {0: 0}


def test_match_ground_truth_respects_threshold_and_category():
    truths = [(0, make_box(0.0, 0.0), "car")]
    assert match_ground_truth(truths, [make_detection(2.5, 0.0)], 2.0) == {}
    assert match_ground_truth(truths, [make_detection(0.1, 0.0, category="bus")], 2.0) == {}


def _straight_gt(frames, speed=0.4):
    gt = GroundTruth()
    for frame in range(frames):
        gt.add(frame, [GroundTruthObject(0, make_box(speed * frame, 2.0))])
    return gt


def test_dataset_records_gaps_beyond_threshold():
    gt = _straight_gt(6)
    detections = {
        frame: [make_detection(0.4 * frame + (2.5 if frame == 2 else 0.1), 2.0, frame=frame)]
        for frame in range(6)
    }
    samples = build_trajectory_dataset(gt, detections, threshold=2.0, window=4)
    assert len(samples) == 3
    first = samples[0]
    assert [s.matched for s in first.steps] == [True, True, False, True]
    assert first.steps[2].confidence == 0.0
    assert first.steps[0].truth == make_box(0.0, 2.0)


def test_dataset_skips_windows_without_detections():
    samples = build_trajectory_dataset(_straight_gt(5), {}, window=4)
    assert samples == []


def test_dataset_cross_camera_filter():
    gt = _straight_gt(4)
    detections = {
        frame: [make_detection(0.4 * frame, 2.0, frame=frame, camera_id=frame // 2)]
        for frame in range(4)
    }
    assert len(build_trajectory_dataset(gt, detections, window=4)) == 1
    assert build_trajectory_dataset(gt, detections, window=4, cross_camera=False) == []


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(window=3)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


def synthetic_samples(rng, count, length=6, gap=3):
    samples = []
    for index in range(count):
        velocity = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0, 0.02, 0.0, 0.0, 0.0])
        start = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), 0.8, 0.1, 4.5, 1.9, 1.6])
        steps = []
        for t in range(length):
            truth = Box3D.from_array(start + t * velocity)
            if t == gap:
                steps.append(TrajectoryStep(t, truth))
                continue
            noise = np.zeros(7)
            noise[:3] = rng.normal(scale=0.05, size=3)
            steps.append(
                TrajectoryStep(
                    t,
                    truth,
                    Box3D.from_array(truth.to_array() + noise),
                    float(rng.uniform(0.3, 1.0)),
                    0,
                )
            )
        samples.append(TrajectorySample(index, "car", tuple(steps)))
    return samples


def test_window_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    weights = LstmWeights.initialize(hidden_size=4, seed=12, scale=0.3)
    batch = WindowBatch.from_samples(synthetic_samples(rng, 2))
    _, _, grads = loss_and_gradients(batch, weights, w_linear=0.01)
    names = list(weights)
    eps = 1e-6
    for _ in range(40):
        name = names[int(rng.integers(len(names)))]
        tensor = weights[name]
        index = tuple(int(rng.integers(s)) for s in tensor.shape)
        saved = tensor[index]
        tensor[index] = saved + eps
        plus, _, _ = loss_and_gradients(batch, weights, w_linear=0.01)
        tensor[index] = saved - eps
        minus, _, _ = loss_and_gradients(batch, weights, w_linear=0.01)
        tensor[index] = saved
        numeric = (plus - minus) / (2 * eps)
        analytic = grads[name][index]
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8, name


def test_amsgrad_zero_learning_rate_is_a_no_op(small_weights):
    before = small_weights.copy()
    optimizer = AmsGrad(small_weights, lr=0.0, weight_decay=1e-4)
    rng = np.random.default_rng(13)
    for _ in range(3):
        optimizer.step({name: rng.normal(size=small_weights[name].shape) for name in small_weights})
    for name in small_weights:
        np.testing.assert_array_equal(small_weights[name], before[name])


def test_amsgrad_first_step_moves_by_learning_rate(small_weights):
    before = small_weights.copy()
    grads = {name: np.full(small_weights[name].shape, 0.5) for name in small_weights}
    AmsGrad(small_weights, lr=0.01, weight_decay=0.0).step(grads)
    for name in small_weights:
        np.testing.assert_allclose(before[name] - small_weights[name], 0.01, rtol=1e-6)


def test_split_dataset_is_seeded():
    samples = synthetic_samples(np.random.default_rng(14), 20)
    train, validation = split_dataset(samples, 0.1, seed=3)
    assert len(validation) == 2 and len(train) == 18
    assert split_dataset(samples, 0.1, seed=3) == (train, validation)
    assert split_dataset(samples, 0.0, seed=3) == (samples, [])


def test_training_rejects_mixed_window_lengths(small_weights):
    rng = np.random.default_rng(15)
    samples = synthetic_samples(rng, 1, length=6) + synthetic_samples(rng, 1, length=5)
    with pytest.raises(ValueError):
        train_motion_model(samples, small_weights, TrainConfig(window=5, epochs=1))
    with pytest.raises(ValueError):
        train_motion_model([], small_weights)


@pytest.mark.slow
def test_overfits_a_single_window():
    samples = synthetic_samples(np.random.default_rng(16), 1, length=10)
    weights = LstmWeights.initialize(hidden_size=16, seed=17)
    config = TrainConfig(
        window=10,
        epochs=2000,
        batch_size=1,
        learning_rate=1e-2,
        w_linear=0.0,
        weight_decay=0.0,
        validation_fraction=0.0,
    )
    initial = evaluate_motion_loss(samples, weights, config)
    train_motion_model(samples, weights, config)
    final = evaluate_motion_loss(samples, weights, config)
    assert final < 1e-3
    assert final < 0.01 * initial


@pytest.fixture(scope="module")
def trained_on_simulation():
    scenario = builtin_scenarios()["constant_velocity_train"]
    gt, bundles = generate(scenario, builtin_rigs()[scenario.rig])
    detections = {bundle.frame: merge_detections(bundle) for bundle in bundles}
    samples = build_trajectory_dataset(gt, detections, window=10)
    weights = LstmWeights.initialize(hidden_size=32, seed=18)
    config = TrainConfig(window=10, epochs=100, batch_size=64, learning_rate=2e-3)
    log = train_motion_model(samples, weights, config)
    return samples, weights, log


@pytest.mark.slow
def test_training_halves_validation_loss_on_simulated_trajectories(trained_on_simulation):
    samples, _, log = trained_on_simulation
    assert len(samples) > 500
    assert len(log) == 100
    assert log[-1].mean_loss < log[0].mean_loss
    assert log[-1].validation_loss < 0.5 * log[0].validation_loss


def crowd_reports(weights, motion_model):
    scenario = builtin_scenarios()["crowd"]
    gt, bundles = generate(scenario, builtin_rigs()[scenario.rig])
    motion = build_motion_model(motion_model, weights)
    return {
        pipeline: evaluate(
            run_pipeline(bundles, TrackerConfig(pipeline=pipeline, motion_model=motion_model), motion=motion),
            gt,
        )
        for pipeline in ("merge_then_track", "track_then_merge", "single_camera")
    }


@pytest.mark.slow
def test_crowd_pipelines_rank_with_trained_motion(trained_on_simulation):
    _, weights, _ = trained_on_simulation
    reports = crowd_reports(weights, "lstm")
    assert reports["merge_then_track"].amota >= reports["track_then_merge"].amota
    assert reports["track_then_merge"].amota >= reports["single_camera"].amota


@pytest.mark.slow
@pytest.mark.xfail(
    reason="velocity-only supervision leaves each track with the offset of its first detection",
    strict=False,
)
def test_trained_motion_localizes_crowd_better_than_no_motion(trained_on_simulation):
    _, weights, _ = trained_on_simulation
    lstm = crowd_reports(weights, "lstm")["merge_then_track"]
    none = crowd_reports(None, "none")["merge_then_track"]
    assert lstm.amotp < none.amotp
