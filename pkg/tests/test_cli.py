import json
import logging
import tomllib

import pytest

from panoptrack.cli import get_log_level, get_seed, main, world_detections
from panoptrack.fusion import FusionConfig, lift_frame
from panoptrack.sim import builtin_rigs, generate, scenario_from_table
from panoptrack.utils.errors import ConfigError

SCENARIO_TOML = """
name = "two_cars"
frames = 12
rig = "pair_overlap"
seed = 9

[noise]
sigma0 = 0.0
range_slope = 0.0
sigma_theta = 0.0
sigma_dim = 0.0
truncation_margin = 0.0

[[objects]]
start = [20.0, -6.0, 0.8]
heading = 1.5707963267948966
speed = 0.5

[[objects]]
start = [35.0, 8.0, 0.8]
heading = -1.5707963267948966
speed = 0.3
"""

SINGLE_RIG_TOML = """
name = "front"

[[cameras]]
camera_id = 0
yaw = 0.0
half_fov = 0.9
"""


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "two_cars.toml"
    path.write_text(SCENARIO_TOML)
    return path


def simulate(tmp_path, scenario_file, name="sim", *extra):
    out = tmp_path / name
    main(["simulate", "--scenario", str(scenario_file), "--out", str(out), "-q", *extra])
    return out


def test_simulate_track_eval_on_noiseless_scenario(tmp_path, scenario_file, capsys, caplog):
    sim = simulate(tmp_path, scenario_file)
    assert sorted(p.name for p in sim.iterdir()) == ["detections.jsonl", "gt.jsonl", "poses.jsonl"]
    result = tmp_path / "result.jsonl"
    main(
        [
            "track",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--out", str(result),
            "-q",
        ]
    )
    report_path = tmp_path / "report.json"
    main(
        [
            "eval",
            "--result", str(result),
            "--gt", str(sim / "gt.jsonl"),
            "--out", str(report_path),
            "--curves", str(tmp_path / "curves.csv"),
            "--iou", "0.25",
        ]
    )
    report = json.loads(report_path.read_text())
    assert report["amota"] == pytest.approx(1.0)
    assert report["amotp"] == pytest.approx(0.0, abs=1e-9)
    assert report["ids"] == 0
    assert report["iou"] == {"threshold": 0.25, "mota": 1.0, "mismatch": 0.0}
    assert json.loads(capsys.readouterr().out) == report
    assert "AMOTA" in caplog.text
    curves = (tmp_path / "curves.csv").read_text().splitlines()
    assert len(curves) == 1 + 39


def test_simulation_output_is_deterministic(tmp_path, scenario_file):
    first = simulate(tmp_path, scenario_file, "first")
    second = simulate(tmp_path, scenario_file, "second", "--jobs", "3")
    for name in ("detections.jsonl", "poses.jsonl", "gt.jsonl"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_seed_flag_keeps_ground_truth(tmp_path, scenario_file):
    first = simulate(tmp_path, scenario_file, "first")
    second = simulate(tmp_path, scenario_file, "second", "--seed", "123")
    assert (first / "gt.jsonl").read_bytes() == (second / "gt.jsonl").read_bytes()


def test_dry_run_writes_nothing(tmp_path, scenario_file):
    out = tmp_path / "dry"
    main(["simulate", "--scenario", str(scenario_file), "--out", str(out), "-n", "-q"])
    assert not out.exists()


def test_single_camera_pipelines_write_identical_results(tmp_path, scenario_file):
    rig = tmp_path / "front.toml"
    rig.write_text(SINGLE_RIG_TOML)
    sim = simulate(tmp_path, scenario_file, "sim", "--rig", str(rig))
    outputs = {}
    for pipeline in ("single", "merge-track"):
        outputs[pipeline] = tmp_path / f"{pipeline}.jsonl"
        main(
            [
                "track",
                "--detections", str(sim / "detections.jsonl"),
                "--poses", str(sim / "poses.jsonl"),
                "--pipeline", pipeline,
                "--out", str(outputs[pipeline]),
                "-q",
            ]
        )
    assert outputs["single"].read_bytes() == outputs["merge-track"].read_bytes()
    assert outputs["single"].read_text()


def test_malformed_detection_line_exits_with_code_two(tmp_path, scenario_file, caplog):
    sim = simulate(tmp_path, scenario_file)
    detections = sim / "detections.jsonl"
    lines = detections.read_text().splitlines()
    lines[1] = lines[1][:-5]
    detections.write_text("\n".join(lines) + "\n")
    with caplog.at_level(logging.CRITICAL, logger="panoptrack"):
        with pytest.raises(SystemExit) as error:
            main(
                [
                    "track",
                    "--detections", str(detections),
                    "--poses", str(sim / "poses.jsonl"),
                    "--out", str(tmp_path / "result.jsonl"),
                    "-q",
                ]
            )
    assert error.value.code == 2
    assert f"{detections.resolve().as_posix()}:2:" in caplog.text
    assert not (tmp_path / "result.jsonl").exists()


def test_lstm_without_weights_is_a_config_error(tmp_path, scenario_file):
    sim = simulate(tmp_path, scenario_file)
    with pytest.raises(SystemExit) as error:
        main(
            [
                "track",
                "--detections", str(sim / "detections.jsonl"),
                "--poses", str(sim / "poses.jsonl"),
                "--motion", "lstm",
                "--out", str(tmp_path / "result.jsonl"),
                "-q",
            ]
        )
    assert error.value.code == 2


def test_paths_can_come_from_the_config_file(tmp_path, scenario_file):
    sim = simulate(tmp_path, scenario_file)
    config = tmp_path / "run.toml"
    config.write_text(
        "[paths]\n"
        f'detections = "{(sim / "detections.jsonl").as_posix()}"\n'
        f'poses = "{(sim / "poses.jsonl").as_posix()}"\n'
        "[tracker]\n"
        'motion_model = "kf3d"\n'
    )
    result = tmp_path / "result.jsonl"
    main(["track", "--config", str(config), "--out", str(result), "-q"])
    assert len(result.read_text().splitlines()) > 0


def test_preset_flag_overrides_the_config_file_preset(tmp_path, scenario_file):
    sim = simulate(tmp_path, scenario_file)
    config = tmp_path / "run.toml"
    config.write_text('preset = "bevformer"\n')
    result = tmp_path / "result.jsonl"
    main(
        [
            "track",
            "--config", str(config),
            "--preset", "detr3d",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--out", str(result),
            "-q",
        ]
    )
    assert result.read_text()


def track_and_eval(tmp_path, sim, name):
    result = tmp_path / f"{name}.jsonl"
    report = tmp_path / f"{name}.json"
    main(
        [
            "track",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--motion", "kf3d",
            "--out", str(result),
            "-q",
        ]
    )
    main(
        [
            "eval",
            "--result", str(result),
            "--gt", str(sim / "gt.jsonl"),
            "--out", str(report),
            "--curves", str(tmp_path / f"{name}.csv"),
            "-q",
        ]
    )
    return result, report


def test_track_and_eval_outputs_are_deterministic(tmp_path, scenario_file):
    sim = simulate(tmp_path, scenario_file)
    first = track_and_eval(tmp_path, sim, "first")
    second = track_and_eval(tmp_path, sim, "second")
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "first.csv").read_bytes() == (tmp_path / "second.csv").read_bytes()


def train_and_compare(tmp_path, sim, name):
    weights = tmp_path / f"{name}.bin"
    table = tmp_path / f"{name}.txt"
    main(
        [
            "train-motion",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--gt", str(sim / "gt.jsonl"),
            "--epochs", "2",
            "--hidden-size", "8",
            "--seed", "5",
            "--out", str(weights),
            "--log", str(tmp_path / f"{name}.csv"),
            "-q",
        ]
    )
    main(
        [
            "compare",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--gt", str(sim / "gt.jsonl"),
            "--weights", str(weights),
            "--n-points", "11",
            "--jobs", "3",
            "--out", str(table),
            "-q",
        ]
    )
    return weights, table, tmp_path / f"{name}.csv"


@pytest.mark.slow
def test_train_motion_and_compare_outputs_are_deterministic(tmp_path, scenario_file):
    sim = simulate(tmp_path, scenario_file)
    first = train_and_compare(tmp_path, sim, "first")
    second = train_and_compare(tmp_path, sim, "second")
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


@pytest.mark.slow
def test_train_motion_then_compare(tmp_path, scenario_file, capsys, caplog):
    sim = simulate(tmp_path, scenario_file)
    weights = tmp_path / "weights.bin"
    dataset = tmp_path / "windows.jsonl"
    main(
        [
            "train-motion",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--gt", str(sim / "gt.jsonl"),
            "--epochs", "2",
            "--hidden-size", "8",
            "--seed", "1",
            "--out", str(weights),
            "--log", str(tmp_path / "train.csv"),
            "--dataset", str(dataset),
            "-q",
        ]
    )
    assert weights.exists()
    assert (tmp_path / "weights.bin.manifest").exists()
    assert len((tmp_path / "train.csv").read_text().splitlines()) == 3
    assert len(dataset.read_text().splitlines()) == 6
    capsys.readouterr()

    table_path = tmp_path / "table.txt"
    main(
        [
            "compare",
            "--detections", str(sim / "detections.jsonl"),
            "--poses", str(sim / "poses.jsonl"),
            "--gt", str(sim / "gt.jsonl"),
            "--weights", str(weights),
            "--n-points", "11",
            "--out", str(table_path),
        ]
    )
    table = table_path.read_text().splitlines()
    assert len(table) == 2 + 9
    assert all(line in caplog.text for line in table)
    assert capsys.readouterr().out == ""


def test_log_level_and_seed_helpers(monkeypatch):
    assert get_log_level("INFO", quiet=True, verbose=False) == logging.ERROR
    assert get_log_level("INFO", quiet=True, verbose=True) == logging.DEBUG
    assert get_log_level("WARNING", quiet=False, verbose=True) == logging.WARNING
    monkeypatch.setenv("PANOPTRACK_SEED", "42")
    assert get_seed(None) == 42
    assert get_seed(7) == 7
    monkeypatch.setenv("PANOPTRACK_SEED", "many")
    with pytest.raises(ConfigError):
        get_seed(None)


def test_training_detections_are_fused_across_cameras():
    scenario = scenario_from_table(tomllib.loads(SCENARIO_TOML))
    gt, bundles = generate(scenario, builtin_rigs()[scenario.rig])
    detections = world_detections(bundles, FusionConfig(), logging.getLogger("panoptrack"))
    assert any(len(lift_frame(b)) > len(gt.frames[b.frame]) for b in bundles)
    for bundle in bundles:
        distinct = {tuple(d.box.to_array().round(6)) for d in lift_frame(bundle)}
        assert len(detections[bundle.frame]) == len(distinct)
