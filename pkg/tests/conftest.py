"""Shared fixtures. The session-scoped lab builds the full desk setup once:
synthetic dataset, two independently seeded checkpoints, and one complete
default pipeline run whose artifacts the acceptance and empirical tests share.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from fovlab.dataset import SyntheticSpec, generate_synthetic
from fovlab.harness import ExperimentConfig, ExperimentResult, run_experiment
from fovlab.model import (Checkpoint, TrainConfig, desk_model_spec,
                          save_checkpoint, train)

DESK_SEED = 7
TRAIN_SEED_A = 1
TRAIN_SEED_B = 2


@dataclass
class Lab:
    root: Path
    data_dir: Path
    images: list
    ckpt_a: Checkpoint
    ckpt_b: Checkpoint
    config: ExperimentConfig
    result: ExperimentResult
    run_seconds: float
    extra: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def lab(tmp_path_factory) -> Lab:
    root = tmp_path_factory.mktemp("desk")
    data_dir = root / "data"
    images = generate_synthetic(SyntheticSpec(num_images=1000, seed=DESK_SEED),
                                data_dir)
    tr, val = images[:800], images[800:]
    spec = desk_model_spec()
    ckpt_a = train(spec, tr, val, TrainConfig(seed=TRAIN_SEED_A),
                   accuracy_target=0.85)
    ckpt_b = train(spec, tr, val, TrainConfig(seed=TRAIN_SEED_B),
                   accuracy_target=0.85)
    model_a = root / "model_a.fovn"
    model_b = root / "model_b.fovn"
    save_checkpoint(ckpt_a, model_a)
    save_checkpoint(ckpt_b, model_b)
    config = ExperimentConfig(
        model_path=str(model_a), model_b_path=str(model_b),
        data_dir=str(data_dir), outdir=str(root / "run1"),
        k_top=1, seed=DESK_SEED, attack_count=200, transfer_count=100,
        ratio_count=24)
    t0 = time.perf_counter()
    result = run_experiment(config)
    seconds = time.perf_counter() - t0
    bad = {k: v for k, v in result.manifest["stages"].items()
           if not k.endswith("_seconds") and v != "ok"}
    assert not bad, f"pipeline stages failed: {bad}"
    return Lab(root, data_dir, images, ckpt_a, ckpt_b, config, result, seconds)
