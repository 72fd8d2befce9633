import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from brainstrip import pipeline
from brainstrip.config import PipelineConfig, parse_config
from brainstrip.core import GroupPartition
from brainstrip.metrics import evaluate

# small enough for a train + segment round in well under a minute
REDUCED = """
svm.epochs = 100
asm.n = 24
asm.n_max = 3
asm.l_max = 1
asm.k_nn = 5
cnn.conv = 4
cnn.stream_width = 8
cnn.fc = 32, 16, 2
train.epochs = 2
train.samples_per_epoch = 1024
adam.alpha = 0.003
tune.trials = 3
tune.slices = 2
phantom.dims = 48, 48, 32
phantom.n_subjects = 3
"""

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def reduced_cfg() -> PipelineConfig:
    return parse_config(REDUCED)


@pytest.fixture(scope="session")
def reduced_config_file(tmp_path_factory) -> Path:
    p = tmp_path_factory.mktemp("cfg") / "reduced.cfg"
    p.write_text(REDUCED)
    return p


@dataclass
class FullRun:
    cfg: PipelineConfig
    train_subjects: list
    test_subjects: list
    bundle: pipeline.Bundle
    masks: list
    infos: list
    scores: list
    partitions: list
    seconds: float


@pytest.fixture(scope="session")
def full_run(tmp_path_factory) -> FullRun:
    """Default configuration: train on 6 phantoms, segment 4 more, timed end to end."""
    cfg = PipelineConfig()
    t0 = time.perf_counter()
    subjects = pipeline.phantom_subjects(range(10), cfg)
    bundle, _ = pipeline.train_pipeline(subjects[:6], cfg)
    path = tmp_path_factory.mktemp("bundle") / "model.bsmb"
    pipeline.save_bundle(path, bundle)
    bundle = pipeline.load_bundle(path)
    masks, infos, scores, parts = [], [], [], []
    for s in subjects[6:]:
        m, info = pipeline.segment_volume(bundle, s.volume, cfg)
        masks.append(m)
        infos.append(info)
        scores.append(evaluate(m, s.mask))
        parts.append((info.partition, GroupPartition.from_labels(s.groups)))
    return FullRun(cfg, subjects[:6], subjects[6:], bundle, masks, infos, scores, parts,
                   time.perf_counter() - t0)


def pytest_collection_modifyitems(items):
    for item in items:
        if "full_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
