from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Dict

import pytest
import yaml

TINY_DOCUMENT: Dict[str, Any] = {
    "env": {
        "kind": "double_well",
        "alphas": [1.0],
        "max_steps": 400,
        "initial": {"kind": "fixed", "point": [0.4]},
    },
    "policy": {"kind": "deterministic", "layers": [4]},
    "estimator": {"kind": "trajectory_dpg"},
    "train": {"k": 4, "iterations": 3, "lr": 1e-3, "seed": 1},
    "output": {"dir": "run", "record_wall_time": False},
}


@pytest.fixture
def tiny_document() -> Dict[str, Any]:
    return copy.deepcopy(TINY_DOCUMENT)


@pytest.fixture
def write_config(tmp_path: Path):
    def _write(document: Dict[str, Any], name: str = "config.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(document))
        return path
    return _write
