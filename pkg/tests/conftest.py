"""Shared fixtures: tiny synthetic datasets and checkpoints, hypothesis profile,
and the per-criterion acceptance summary printed at the end of the session."""
from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from renderflow.model import NetConfig
from renderflow.scene.sequence import SequenceConfig, load_dataset, write_dataset
from renderflow.train import TrainConfig, train_stage1, train_stage2

settings.register_profile("renderflow", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("renderflow")

ACCEPTANCE_LINES: list = []

TINY_SEQ = SequenceConfig(frames=8, res=(16, 16), env_res=(8, 16), n_objects=2)
TINY_NET = dict(dim=16, depth=1, heads=2, patch=4, lora_rank=2, env_patch=4, image_res=(16, 16), env_res=(8, 16))


def record_acceptance(number: int, title: str, passed: bool, detail: str = ""):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}"
    if detail:
        line += f" :: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    write_dataset(out, seed=3, n_sequences=6, config=TINY_SEQ, val_frac=0.2, test_frac=0.0)
    return out


@pytest.fixture(scope="session")
def tiny_train(tiny_data_dir):
    return load_dataset(tiny_data_dir, "train")


@pytest.fixture(scope="session")
def tiny_val(tiny_data_dir):
    return load_dataset(tiny_data_dir, "val")


@pytest.fixture(scope="session")
def tiny_net_config():
    return NetConfig(**TINY_NET)


@pytest.fixture(scope="session")
def tiny_base_ckpt(tiny_train, tiny_net_config):
    cfg = TrainConfig(steps=50, batch=2, lr=1e-3, warmup_steps=5, clip_frames=4, seed=0)
    return train_stage1(tiny_train, cfg, tiny_net_config)


@pytest.fixture(scope="session")
def tiny_kf_ckpt(tiny_train, tiny_base_ckpt):
    cfg = TrainConfig(stage="keyframe", steps=10, batch=2, lr=1e-3, warmup_steps=2, clip_frames=4,
                      keyframe_gap=3, seed=0)
    return train_stage2(tiny_train, tiny_base_ckpt, cfg)
