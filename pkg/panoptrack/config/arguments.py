from typing import Any, Dict, Optional

from panoptrack.config.defaults import (
    MATCHERS,
    MOTION_MODELS,
    N_POINTS,
    PIPELINE_ALIASES,
    PRESETS,
    RESULT_FILE,
    SEED_ENV_VAR,
)
from panoptrack.utils.filesystem import resolve

PIPELINE_CHOICES = sorted(PIPELINE_ALIASES)

COMMON = {
    "dry_run": {
        "action": "store_true",
        "help": "do not write any files (outputs are kept in memory and discarded)",
        "shorthands": ["d", "n"],
    },
    "log_file": {
        "default": None,
        "help": (
            "log output to specified file "
            "(all messages logged to file regardless of log level)"
        ),
        "metavar": "<path>",
        "type": str,
    },
    "log_level": {
        "choices": ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        "default": "INFO",
        "help": (
            "set the console logging level "
            "(overrides --quiet and --verbose)"
        ),
        "metavar": "<level>",
        "type": str,
    },
    "quiet": {
        "action": "store_true",
        "help": (
            "suppress all output except errors "
            "(equivalent to setting --log-level=ERROR)"
        ),
        "shorthands": ["q"],
    },
    "verbose": {
        "action": "store_true",
        "help": (
            "report per-frame association details "
            "(equivalent to setting --log-level=DEBUG, overrides --quiet)"
        ),
        "shorthands": ["v"],
    },
}

_CONFIG = {
    "default": None,
    "help": "TOML run configuration (flags given here override it)",
    "metavar": "<toml>",
    "postprocess": [resolve],
    "type": str,
}

_PRESET = {
    "default": None,
    "help": "detector preset for tracker thresholds",
    "help_choices": sorted(PRESETS),
    "metavar": "<name>",
    "type": str,
}

_WEIGHTS = {
    "default": None,
    "help": "trained motion-model weights (needed by the lstm motion model)",
    "metavar": "<path>",
    "postprocess": [resolve],
    "type": str,
}

_MATCHER = {
    "default": None,
    "help": "metric matching rule as <kind>:<threshold>",
    "help_choices": list(MATCHERS),
    "metavar": "<matcher>",
    "type": str,
}

_N_POINTS = {
    "default": None,
    "help": f"number of recall sampling points (defaults to {N_POINTS})",
    "metavar": "<n>",
    "type": int,
}


def _path(help: str, from_config: bool = False, default: Optional[str] = None) -> Dict[str, Any]:
    params: Dict[str, Any] = {
        "help": help,
        "metavar": "<path>",
        "postprocess": [resolve],
        "type": str,
    }
    if from_config:
        params["help"] += " (or set it under [paths] in the config)"
    params["default"] = default
    return params


COMMANDS = {
    "simulate": {
        "help": "generate ground truth and noisy multi-camera detections",
        "options": {
            "jobs": {
                "default": 1,
                "help": "number of frames generated in parallel",
                "metavar": "<n>",
                "shorthands": ["j"],
                "type": int,
            },
            "out": {
                "default": None,
                "help": "output directory (defaults to runs/<scenario>-seed-<seed>)",
                "metavar": "<dir>",
                "shorthands": ["o"],
                "type": str,
            },
            "rig": {
                "default": None,
                "help": "camera rig as builtin:<name> or TOML file (defaults to the scenario's rig)",
                "metavar": "<rig>",
                "type": str,
            },
            "scenario": {
                "help": "scenario as builtin:<name> or TOML file",
                "metavar": "<scenario>",
                "required": True,
                "type": str,
            },
            "seed": {
                "default": None,
                "help": f"random seed (defaults to ${SEED_ENV_VAR}, then the scenario's seed)",
                "metavar": "<u64>",
                "type": int,
            },
        },
    },
    "track": {
        "help": "track objects through detection and pose files",
        "options": {
            "config": _CONFIG,
            "detections": _path("detections JSON Lines file", from_config=True),
            "motion": {
                "default": None,
                "help": "motion model",
                "help_choices": list(MOTION_MODELS),
                "metavar": "<model>",
                "type": str,
            },
            "out": _path("tracking result file", default=RESULT_FILE) | {"shorthands": ["o"]},
            "pipeline": {
                "default": None,
                "help": "tracking pipeline",
                "help_choices": PIPELINE_CHOICES,
                "metavar": "<pipeline>",
                "type": str,
            },
            "poses": _path("camera poses JSON Lines file", from_config=True),
            "preset": _PRESET,
            "weights": _WEIGHTS,
        },
    },
    "train-motion": {
        "help": "train the recurrent motion model on matched trajectories",
        "options": {
            "config": _CONFIG,
            "detections": _path("detections JSON Lines file", from_config=True),
            "epochs": {
                "default": None,
                "help": "number of training epochs",
                "metavar": "<n>",
                "type": int,
            },
            "gt": _path("ground-truth JSON Lines file", from_config=True),
            "hidden_size": {
                "default": None,
                "help": "LSTM hidden size",
                "metavar": "<n>",
                "type": int,
            },
            "log": _path("per-epoch CSV training log", default="train.csv"),
            "out": _path("weights file", default="weights.bin") | {"shorthands": ["o"]},
            "poses": _path("camera poses JSON Lines file", from_config=True),
            "seed": {
                "default": None,
                "help": f"random seed for initialization and shuffling (defaults to ${SEED_ENV_VAR})",
                "metavar": "<u64>",
                "type": int,
            },
            "dataset": _path("also write the trajectory windows to this JSON Lines file"),
            "single_camera": {
                "action": "store_true",
                "help": "only train on windows observed by a single camera",
            },
        },
    },
    "eval": {
        "help": "score a tracking result against ground truth",
        "options": {
            "config": _CONFIG,
            "curves": _path("recall-curve CSV file", default="curves.csv"),
            "gt": _path("ground-truth JSON Lines file", from_config=True),
            "iou": {
                "default": None,
                "help": "also report single-threshold MOTA and mismatch ratio at this 3D IoU",
                "metavar": "<threshold>",
                "type": float,
            },
            "matcher": _MATCHER,
            "n_points": _N_POINTS,
            "out": _path("metric report JSON file", default="report.json") | {"shorthands": ["o"]},
            "result": _path("tracking result file", from_config=True),
        },
    },
    "compare": {
        "help": "run every pipeline with every motion model and tabulate the metrics",
        "options": {
            "config": _CONFIG,
            "detections": _path("detections JSON Lines file", from_config=True),
            "gt": _path("ground-truth JSON Lines file", from_config=True),
            "jobs": {
                "default": 1,
                "help": "number of configurations run in parallel",
                "metavar": "<n>",
                "shorthands": ["j"],
                "type": int,
            },
            "matcher": _MATCHER,
            "n_points": _N_POINTS,
            "out": _path("comparison table file", default="table.txt") | {"shorthands": ["o"]},
            "poses": _path("camera poses JSON Lines file", from_config=True),
            "preset": _PRESET,
            "weights": _WEIGHTS,
        },
    },
}
